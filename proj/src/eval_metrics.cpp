#include "plc/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

#include "plc/error.hpp"

namespace plc {

PatchMask detect_region(const PatchScores& z, std::size_t k) {
  if (k >= z.classes()) throw ShapeError("detect_region: class out of range");
  PatchMask m(z.grid());
  for (std::size_t c = 0; c < z.cells(); ++c) m.set(c, z.at(c, k) >= 0.5);
  return m;
}

Overlap iou_ior(const PatchMask& region, const PatchMask& box) {
  if (region.grid() != box.grid()) throw ShapeError("iou_ior: grid mismatch");
  const std::size_t nb = box.count();
  if (nb == 0) throw DataError("iou_ior: empty box");
  const std::size_t inter = (region & box).count();
  const std::size_t uni = (region | box).count();
  const std::size_t nr = region.count();
  Overlap o;
  o.iou = static_cast<double>(inter) / static_cast<double>(uni);
  o.ior = nr == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(nr);
  return o;
}

std::string to_string(Criterion c) { return c == Criterion::kIoU ? "IoU" : "IoR"; }

std::optional<double> AccuracyTable::mean(Criterion c) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& cell : column(c)) {
    if (cell.accuracy) {
      total += *cell.accuracy;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

AccuracyTable localization_accuracy(const std::vector<SampleOverlap>& results,
                                    std::size_t classes, double T) {
  if (!(T > 0.0 && T <= 1.0)) throw ConfigError("localization_accuracy: T must lie in (0, 1]");
  AccuracyTable t;
  t.T = T;
  t.iou.assign(classes, {});
  t.ior.assign(classes, {});
  std::vector<std::size_t> hit_iou(classes, 0), hit_ior(classes, 0);
  for (const auto& r : results) {
    if (r.cls >= classes) throw ShapeError("localization_accuracy: class out of range");
    ++t.iou[r.cls].n;
    ++t.ior[r.cls].n;
    if (r.overlap.iou >= T) ++hit_iou[r.cls];
    if (r.overlap.ior >= T) ++hit_ior[r.cls];
  }
  for (std::size_t k = 0; k < classes; ++k) {
    if (t.iou[k].n == 0) continue;
    const double n = static_cast<double>(t.iou[k].n);
    t.iou[k].accuracy = static_cast<double>(hit_iou[k]) / n;
    t.ior[k].accuracy = static_cast<double>(hit_ior[k]) / n;
  }
  return t;
}

void write_accuracy_csv(std::ostream& os, const AccuracyTable& table,
                        const std::vector<std::string>& class_names) {
  os << "class,criterion,T,accuracy,n\n";
  for (Criterion c : {Criterion::kIoU, Criterion::kIoR}) {
    const auto& col = table.column(c);
    for (std::size_t k = 0; k < col.size(); ++k) {
      os << class_names.at(k) << ',' << to_string(c) << ',' << table.T << ',';
      if (col[k].accuracy) os << std::setprecision(6) << *col[k].accuracy;
      os << ',' << col[k].n << '\n';
    }
  }
}

FoldPlan make_folds(const std::vector<std::size_t>& ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("make_folds: need k >= 2");
  if (ids.empty()) throw ConfigError("make_folds: no ids to split");
  if (k > ids.size()) {
    throw ConfigError("make_folds: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(ids.size()) + " samples");
  }
  std::vector<std::size_t> order = ids;
  std::mt19937_64 rng(seed);
  // Fisher-Yates by hand: std::shuffle's draw pattern is implementation-defined.
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.test.resize(k);
  for (std::size_t i = 0; i < order.size(); ++i) plan.test[i % k].push_back(order[i]);
  for (auto& f : plan.test) std::sort(f.begin(), f.end());
  plan.train.resize(k);
  for (std::size_t f = 0; f < k; ++f) {
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) plan.train[f].insert(plan.train[f].end(), plan.test[g].begin(), plan.test[g].end());
    }
    std::sort(plan.train[f].begin(), plan.train[f].end());
  }
  return plan;
}

FoldSummary summarize_folds(const std::vector<AccuracyTable>& tables) {
  FoldSummary s;
  if (tables.empty()) return s;
  const std::size_t K = tables[0].iou.size();
  auto stat = [](const std::vector<double>& v) {
    FoldStat st;
    st.folds = v.size();
    if (v.empty()) return st;
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    st.mean = m;
    st.stddev = std::sqrt(var / static_cast<double>(v.size()));
    return st;
  };
  for (Criterion c : {Criterion::kIoU, Criterion::kIoR}) {
    auto& out = c == Criterion::kIoU ? s.iou : s.ior;
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> v;
      for (const auto& t : tables) {
        if (t.column(c).at(k).accuracy) v.push_back(*t.column(c)[k].accuracy);
      }
      out.push_back(stat(v));
    }
    std::vector<double> means;
    for (const auto& t : tables) {
      if (auto m = t.mean(c)) means.push_back(*m);
    }
    (c == Criterion::kIoU ? s.mean_iou : s.mean_ior) = stat(means).mean;
  }
  return s;
}

void write_summary_csv(std::ostream& os, const FoldSummary& summary,
                       const std::vector<std::string>& class_names) {
  os << "class,iou_mean,iou_std,ior_mean,ior_std,folds\n";
  os << std::setprecision(6);
  for (std::size_t k = 0; k < summary.iou.size(); ++k) {
    os << class_names.at(k) << ',';
    for (const FoldStat* st : {&summary.iou[k], &summary.ior[k]}) {
      if (st->mean) {
        os << *st->mean << ',' << st->stddev << ',';
      } else {
        os << ",,";
      }
    }
    os << summary.iou[k].folds << '\n';
  }
}

void write_bar_svg(std::ostream& os, const std::string& title,
                   const std::vector<std::string>& class_names,
                   const std::vector<BarSeries>& series) {
  static const char* kColors[] = {"#4472c4", "#ed7d31", "#70ad47", "#7f6000", "#7030a0"};
  const double bar = 18.0, gap = 14.0, height = 200.0, left = 48.0, top = 36.0;
  const double group = bar * static_cast<double>(std::max<std::size_t>(series.size(), 1)) + gap;
  const double width = left + group * static_cast<double>(class_names.size()) + 140.0;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << top + height + 60.0 << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << width - 140.0
     << "\" y2=\"" << top + height << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = top + height - height * tick / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
       << tick * 0.25 << "</text>\n";
  }
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    const double x0 = left + gap / 2 + group * static_cast<double>(k);
    for (std::size_t s = 0; s < series.size(); ++s) {
      const auto& v = series[s].values.at(k);
      if (!v) continue;
      const double h = height * std::clamp(*v, 0.0, 1.0);
      os << "<rect x=\"" << x0 + bar * static_cast<double>(s) << "\" y=\"" << top + height - h
         << "\" width=\"" << bar - 2 << "\" height=\"" << h << "\" fill=\"" << kColors[s % 5]
         << "\"/>\n";
    }
    os << "<text x=\"" << x0 + (group - gap) / 2 << "\" y=\"" << top + height + 16
       << "\" text-anchor=\"middle\">" << class_names[k] << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + 14.0 * static_cast<double>(s);
    os << "<rect x=\"" << width - 130 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
       << kColors[s % 5] << "\"/><text x=\"" << width - 115 << "\" y=\"" << y + 9 << "\">"
       << series[s].label << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace plc
