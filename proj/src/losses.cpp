#include "plc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

#include "plc/error.hpp"
#include "plc/ops.hpp"

namespace plc {

namespace {

double relu(double v) { return v > 0.0 ? v : 0.0; }

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void check_class(const PatchScores& z, std::size_t k, const char* op) {
  if (k >= z.classes()) {
    throw ShapeError(std::string(op) + ": class " + std::to_string(k) +
                     " out of range for K=" + std::to_string(z.classes()));
  }
}

void check_mask(const PatchScores& z, const PatchMask& box, const char* op) {
  if (box.grid() != z.grid()) {
    throw ShapeError(std::string(op) + ": box grid " + std::to_string(box.grid()) +
                     " vs scores grid " + std::to_string(z.grid()));
  }
}

template <typename Real>
NllResult raw_nll(const PatchScores& p, std::size_t k, const PatchMask& box) {
  Real prod = 1;
  for (std::size_t c = 0; c < p.cells(); ++c) {
    const Real v = static_cast<Real>(p.at(c, k));
    prod *= box.get(c) ? v : Real(1) - v;
  }
  if (prod == Real(0)) return {std::numeric_limits<double>::infinity(), true};
  return {-std::log(static_cast<double>(prod)), false};
}

}  // namespace

LossFamily parse_loss_family(const std::string& name) {
  if (name == "baseline") return LossFamily::kBaseline;
  if (name == "sigmoid") return LossFamily::kSigmoid;
  if (name == "relu") return LossFamily::kRelu;
  throw ConfigError("unknown loss family '" + name + "' (baseline|sigmoid|relu)");
}

std::string to_string(LossFamily family) {
  switch (family) {
    case LossFamily::kBaseline: return "baseline";
    case LossFamily::kSigmoid: return "sigmoid";
    case LossFamily::kRelu: return "relu";
  }
  return "?";
}

std::string to_string(Precision precision) {
  return precision == Precision::kF32 ? "f32" : "f64";
}

Annotation Annotation::empty(std::size_t classes, std::size_t grid) {
  Annotation a;
  a.labels.assign(classes, 0);
  a.annotated.assign(classes, 0);
  a.boxes.assign(classes, PatchMask(grid));
  return a;
}

bool Annotation::any_annotated() const {
  return std::any_of(annotated.begin(), annotated.end(), [](auto v) { return v != 0; });
}

void Annotation::validate(std::size_t classes, std::size_t grid, const std::string& id) const {
  if (labels.size() != classes || annotated.size() != classes || boxes.size() != classes) {
    throw DataError("sample " + id + ": expected " + std::to_string(classes) +
                    " classes in labels/annotated/boxes");
  }
  for (std::size_t k = 0; k < classes; ++k) {
    if (labels[k] > 1 || annotated[k] > 1) {
      throw DataError("sample " + id + ": flags must be 0 or 1 (class " + std::to_string(k) + ")");
    }
    if (boxes[k].grid() != grid) {
      throw DataError("sample " + id + ": box grid mismatch for class " + std::to_string(k));
    }
    if (annotated[k] && !labels[k]) {
      throw DataError("sample " + id + ": class " + std::to_string(k) +
                      " annotated with a box but labelled absent");
    }
    if (annotated[k] && boxes[k].empty()) {
      throw DataError("sample " + id + ": class " + std::to_string(k) +
                      " annotated with an empty box");
    }
    if (!annotated[k] && !boxes[k].empty()) {
      throw DataError("sample " + id + ": class " + std::to_string(k) +
                      " has a box but is not flagged annotated");
    }
  }
}

ThresholdSet ThresholdSet::uniform(std::size_t k, ClassThresholds value) {
  ThresholdSet t;
  t.classes.assign(k, value);
  return t;
}

void LossConfig::validate(std::size_t classes) const {
  if (!(lambda_ann > 0.0)) throw ConfigError("loss: lambda_ann must be positive");
  if (gamma.size() != classes) {
    throw ConfigError("loss: gamma needs " + std::to_string(classes) + " entries, got " +
                      std::to_string(gamma.size()));
  }
  for (double g : gamma) {
    if (!(g > 0.0)) throw ConfigError("loss: gamma entries must be positive");
  }
}

NllResult baseline_ann_nll(const PatchScores& p, std::size_t k, const PatchMask& box,
                           ProductMode mode) {
  check_class(p, k, "baseline_ann_nll");
  check_mask(p, box, "baseline_ann_nll");
  if (box.empty()) throw DataError("baseline_ann_nll: empty box");
  if (mode == ProductMode::kRawProduct) return raw_nll<double>(p, k, box);
  double nll = 0.0;
  for (std::size_t c = 0; c < p.cells(); ++c) {
    const double v = box.get(c) ? p.at(c, k) : 1.0 - p.at(c, k);
    if (v <= 0.0) return {std::numeric_limits<double>::infinity(), true};
    nll -= std::log(v);
  }
  return {nll, false};
}

double baseline_un_prob(const PatchScores& p, std::size_t k) {
  check_class(p, k, "baseline_un_prob");
  double none = 1.0;
  for (std::size_t c = 0; c < p.cells(); ++c) none *= 1.0 - p.at(c, k);
  return 1.0 - none;
}

std::vector<SigmoidClassLoss> sigmoid_losses(const PatchScores& z, const Annotation& ann,
                                             const ThresholdSet& th, double steepness) {
  std::vector<SigmoidClassLoss> out(z.classes());
  for (std::size_t k = 0; k < z.classes(); ++k) {
    const auto& t = th.classes.at(k);
    if (ann.annotated[k]) {
      const auto& box = ann.boxes[k];
      const auto comp = box.complement();
      const double in = z.class_sum(k, box), outside = z.class_sum(k, comp);
      out[k].ann = -sigmoid(steepness * (in - t.tau * static_cast<double>(box.count()))) *
                   sigmoid(steepness * (t.rho * static_cast<double>(comp.count()) - outside));
    }
    const double s = z.class_sum(k);
    out[k].un = ann.labels[k] ? -sigmoid(steepness * (s - t.tau_hat))
                              : -sigmoid(steepness * (t.rho_hat - s));
  }
  return out;
}

double relu_ann_loss(const PatchScores& z, std::size_t k, const PatchMask& box, double tau,
                     double rho) {
  check_class(z, k, "relu_ann_loss");
  check_mask(z, box, "relu_ann_loss");
  const auto comp = box.complement();
  const double nb = static_cast<double>(box.count());
  const double nc = static_cast<double>(comp.count());
  if (nb == 0.0) throw DataError("relu_ann_loss: empty box");
  if (nc == 0.0) throw DataError("relu_ann_loss: box covers the whole grid");
  // fma keeps the constraint test exact whatever the contraction flags.
  return relu(std::fma(tau, nb, -z.class_sum(k, box))) / nb +
         relu(std::fma(-rho, nc, z.class_sum(k, comp))) / nc;
}

double relu_un_loss(const PatchScores& z, std::size_t k, bool y, double tau_hat, double rho_hat,
                    double gamma) {
  check_class(z, k, "relu_un_loss");
  const double s = z.class_sum(k);
  return y ? relu(tau_hat - s) : gamma * relu(s - rho_hat);
}

double full_loss(const PatchScores& z, const Annotation& ann, const ThresholdSet& th,
                 const LossConfig& cfg) {
  if (ann.classes() != z.classes() || th.classes.size() != z.classes()) {
    throw ShapeError("full_loss: class count mismatch");
  }
  double total = 0.0;
  if (cfg.family == LossFamily::kSigmoid) {
    const auto parts = sigmoid_losses(z, ann, th, cfg.sigmoid_steepness);
    for (std::size_t k = 0; k < z.classes(); ++k) {
      total += ann.annotated[k] ? cfg.lambda_ann * parts[k].ann : parts[k].un;
    }
    return total;
  }
  for (std::size_t k = 0; k < z.classes(); ++k) {
    if (cfg.family == LossFamily::kRelu) {
      const auto& t = th.classes[k];
      total += ann.annotated[k]
                   ? cfg.lambda_ann * relu_ann_loss(z, k, ann.boxes[k], t.tau, t.rho)
                   : relu_un_loss(z, k, ann.labels[k] != 0, t.tau_hat, t.rho_hat, cfg.gamma.at(k));
      continue;
    }
    if (ann.annotated[k]) {
      total += cfg.lambda_ann * baseline_ann_nll(z, k, ann.boxes[k]).value;
    } else {
      const double prob = baseline_un_prob(z, k);
      total += ann.labels[k] ? -std::log(prob) : -std::log1p(-prob);
    }
  }
  return total;
}

BatchTargets make_targets(const std::vector<const Annotation*>& batch, std::size_t grid) {
  if (batch.empty()) throw ShapeError("make_targets: empty batch");
  BatchTargets t;
  t.batch = batch.size();
  t.classes = batch[0]->classes();
  t.grid = grid;
  const std::size_t N = t.batch, K = t.classes, cells = grid * grid;
  std::vector<double> box(N * K * cells, 0.0), comp(N * K * cells, 0.0);
  t.labels.resize(N * K);
  t.annotated.resize(N * K);
  t.box_size.assign(N * K, 0.0);
  t.complement_size.assign(N * K, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const Annotation& a = *batch[n];
    if (a.classes() != K) throw ShapeError("make_targets: class count mismatch in batch");
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t nk = n * K + k;
      t.labels[nk] = a.labels[k];
      t.annotated[nk] = a.annotated[k];
      if (!a.annotated[k]) continue;
      for (std::size_t c = 0; c < cells; ++c) {
        const bool in = a.boxes[k].get(c);
        box[nk * cells + c] = in ? 1.0 : 0.0;
        comp[nk * cells + c] = in ? 0.0 : 1.0;
      }
      t.box_size[nk] = static_cast<double>(a.boxes[k].count());
      t.complement_size[nk] = static_cast<double>(cells) - t.box_size[nk];
      if (t.box_size[nk] == 0.0 || t.complement_size[nk] == 0.0) {
        throw DataError("make_targets: annotated box must be a nonempty proper subset");
      }
    }
  }
  const Shape shape{N, K, grid, grid};
  t.box = Tensor(shape, std::move(box));
  t.complement = Tensor(shape, std::move(comp));
  t.ones = Tensor(shape, 1.0);
  return t;
}

BatchLoss batch_loss(const Tensor& z, const BatchTargets& t, const ThresholdSet& th,
                     const LossConfig& cfg) {
  const Shape expect{t.batch, t.classes, t.grid, t.grid};
  if (z.shape() != expect) {
    throw ShapeError("batch_loss: scores " + shape_str(z.shape()) + " vs targets " +
                     shape_str(expect));
  }
  if (th.classes.size() != t.classes) throw ShapeError("batch_loss: threshold count mismatch");
  cfg.validate(t.classes);
  const std::size_t N = t.batch, K = t.classes, NK = N * K;
  const Shape nk_shape{N, K};
  auto per_nk = [&](auto&& fn) {
    std::vector<double> v(NK);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) v[n * K + k] = fn(n * K + k, k);
    return Tensor(nk_shape, std::move(v));
  };
  auto ann = [&](std::size_t nk) { return t.annotated[nk] != 0; };
  auto pos = [&](std::size_t nk) { return t.labels[nk] != 0; };

  Tensor ann_terms, un_terms;  // [N,K], already weighted
  if (cfg.family == LossFamily::kRelu || cfg.family == LossFamily::kSigmoid) {
    const Tensor s_in = ops::masked_sum(z, t.box, 2);
    const Tensor s_out = ops::masked_sum(z, t.complement, 2);
    const Tensor s_all = ops::masked_sum(z, t.ones, 2);
    // Inactive entries get offsets of -1 so their hinge sits away from the kink.
    const Tensor need_in = per_nk([&](std::size_t nk, std::size_t k) {
      return ann(nk) ? th.classes[k].tau * t.box_size[nk] : -1.0;
    });
    const Tensor allow_out = per_nk([&](std::size_t nk, std::size_t k) {
      return ann(nk) ? th.classes[k].rho * t.complement_size[nk] : 1.0;
    });
    const Tensor tau_hat = per_nk([&](std::size_t, std::size_t k) { return th.classes[k].tau_hat; });
    const Tensor rho_hat = per_nk([&](std::size_t, std::size_t k) { return th.classes[k].rho_hat; });
    const Tensor w_pos = per_nk([&](std::size_t nk, std::size_t) {
      return (!ann(nk) && pos(nk)) ? 1.0 : 0.0;
    });
    if (cfg.family == LossFamily::kRelu) {
      const Tensor inv_box = per_nk([&](std::size_t nk, std::size_t) {
        return ann(nk) ? cfg.lambda_ann / t.box_size[nk] : 0.0;
      });
      const Tensor inv_comp = per_nk([&](std::size_t nk, std::size_t) {
        return ann(nk) ? cfg.lambda_ann / t.complement_size[nk] : 0.0;
      });
      const Tensor w_neg = per_nk([&](std::size_t nk, std::size_t k) {
        return (!ann(nk) && !pos(nk)) ? cfg.gamma[k] : 0.0;
      });
      ann_terms = ops::add(ops::hadamard(ops::relu(ops::sub(need_in, s_in)), inv_box),
                           ops::hadamard(ops::relu(ops::sub(s_out, allow_out)), inv_comp));
      un_terms = ops::add(ops::hadamard(ops::relu(ops::sub(tau_hat, s_all)), w_pos),
                          ops::hadamard(ops::relu(ops::sub(s_all, rho_hat)), w_neg));
    } else {
      const double s = cfg.sigmoid_steepness;
      const Tensor w_ann = per_nk([&](std::size_t nk, std::size_t) {
        return ann(nk) ? -cfg.lambda_ann : 0.0;
      });
      const Tensor w_neg = per_nk([&](std::size_t nk, std::size_t) {
        return (!ann(nk) && !pos(nk)) ? 1.0 : 0.0;
      });
      const Tensor inside = ops::sigmoid(ops::mul(ops::sub(s_in, need_in), s));
      const Tensor outside = ops::sigmoid(ops::mul(ops::sub(allow_out, s_out), s));
      ann_terms = ops::hadamard(ops::hadamard(inside, outside), w_ann);
      un_terms = ops::mul(
          ops::add(ops::hadamard(ops::sigmoid(ops::mul(ops::sub(s_all, tau_hat), s)), w_pos),
                   ops::hadamard(ops::sigmoid(ops::mul(ops::sub(rho_hat, s_all), s)), w_neg)),
          -1.0);
    }
  } else {
    const Tensor log_p = ops::log_clamped(z, cfg.log_floor);
    const Tensor log_q = ops::log_clamped(ops::affine(z, -1.0, 1.0), cfg.log_floor);
    const Tensor w_ann = per_nk([&](std::size_t nk, std::size_t) {
      return ann(nk) ? -cfg.lambda_ann : 0.0;
    });
    ann_terms = ops::hadamard(
        ops::add(ops::masked_sum(log_p, t.box, 2), ops::masked_sum(log_q, t.complement, 2)),
        w_ann);
    // log prod_j (1 - p_j) <= 0; positives pay -log(1 - e^s), negatives -s.
    const Tensor none = ops::masked_sum(log_q, t.ones, 2);
    const Tensor w_pos = per_nk([&](std::size_t nk, std::size_t) {
      return (!ann(nk) && pos(nk)) ? 1.0 : 0.0;
    });
    const Tensor w_neg = per_nk([&](std::size_t nk, std::size_t) {
      return (!ann(nk) && !pos(nk)) ? -1.0 : 0.0;
    });
    un_terms = ops::add(ops::hadamard(ops::neg_log1mexp(none, std::log1p(-1e-7)), w_pos),
                        ops::hadamard(none, w_neg));
  }

  const Tensor per_entry = ops::add(ann_terms, un_terms);
  BatchLoss out;
  out.total = ops::mul(ops::sum(per_entry), 1.0 / static_cast<double>(N));
  out.per_class.assign(K, 0.0);
  for (std::size_t nk = 0; nk < NK; ++nk) {
    out.per_class[nk % K] += per_entry[nk] / static_cast<double>(N);
  }
  return out;
}

std::vector<StabilityRow> stability_report(const std::vector<std::size_t>& grids,
                                           const std::vector<double>& p_values,
                                           const std::vector<Precision>& precisions) {
  std::vector<StabilityRow> rows;
  for (std::size_t P : grids) {
    if (P == 0) throw ConfigError("stability: grid side must be >= 1");
    for (double p : p_values) {
      PatchScores z(P, 1, p);
      const PatchMask full(P, true);
      double eq9 = 0.0;
      if (P == 1) {
        eq9 = std::max(0.0, 0.5 - p);  // box is the whole grid: inside term only
      } else {
        PatchMask half(P);
        for (std::size_t r = 0; r < P / 2; ++r)
          for (std::size_t c = 0; c < P; ++c) half.set(r, c);
        eq9 = relu_ann_loss(z, 0, half, 0.5, 0.1);
      }
      const double logdomain = baseline_ann_nll(z, 0, full, ProductMode::kLogDomain).value;
      for (Precision prec : precisions) {
        const NllResult raw = prec == Precision::kF32 ? raw_nll<float>(z, 0, full)
                                                      : raw_nll<double>(z, 0, full);
        rows.push_back({P, p, prec, raw.value, logdomain, eq9, raw.infinite});
      }
    }
  }
  return rows;
}

void write_stability_csv(std::ostream& os, const std::vector<StabilityRow>& rows) {
  os << "P,p_value,precision,eq1_raw,eq1_logdomain,eq9_loss,underflow_flag\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.grid << ',' << r.p_value << ',' << to_string(r.precision) << ',';
    if (std::isinf(r.eq1_raw)) {
      os << "inf";
    } else {
      os << r.eq1_raw;
    }
    os << ',' << r.eq1_logdomain << ',' << r.eq9_loss << ',' << (r.underflow ? "true" : "false")
       << '\n';
  }
}

}  // namespace plc
