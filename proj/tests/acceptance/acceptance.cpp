#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <malloc.h>

#include "plc/backbone.hpp"
#include "plc/checkpoint.hpp"
#include "plc/crf_pac.hpp"
#include "plc/data_synth.hpp"
#include "plc/eval_metrics.hpp"
#include "plc/losses.hpp"
#include "plc/ops.hpp"
#include "plc/runner.hpp"
#include "plc/threshold_fit.hpp"
#include "support/gradcheck.hpp"

using namespace plc;
using plc::testing::random_tensor;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> read_calibration(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

Annotation random_annotation(std::size_t K, std::size_t P, std::mt19937_64& rng) {
  Annotation a = Annotation::empty(K, P);
  for (std::size_t k = 0; k < K; ++k) {
    a.labels[k] = rng() % 2;
    if (a.labels[k] && rng() % 2 == 1) {
      a.annotated[k] = 1;
      a.boxes[k] = PatchMask(P);
      const std::size_t r0 = rng() % (P - 1), c0 = rng() % (P - 1);
      const std::size_t r1 = r0 + rng() % (P - 1 - r0), c1 = c0 + rng() % (P - 1 - c0);
      for (std::size_t r = r0; r <= r1; ++r)
        for (std::size_t c = c0; c <= c1; ++c) a.boxes[k].set(r, c);
    }
  }
  return a;
}

void fill(Tensor& t, const Tensor& src) {
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = src[i];
}

// ---- 1: gradients -----------------------------------------------------------

struct GradTally {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t coords = 0;
  double worst = 0.0;
  std::string worst_where;
};

void record(GradTally& tally, const plc::testing::GradCheckResult& r, const std::string& path) {
  if (r.near_kink) {
    ++tally.rejected;
    return;
  }
  ++tally.accepted;
  tally.coords += r.compared;
  if (r.max_rel_error > tally.worst) {
    tally.worst = r.max_rel_error;
    tally.worst_where = path + " " + r.worst;
  }
}

BackboneConfig random_backbone(std::mt19937_64& rng) {
  BackboneConfig c;
  c.grid = 2 + rng() % 3;
  c.classes = 1 + rng() % 3;
  const std::size_t stages = 1 + rng() % 2;
  c.widths.assign(stages, 0);
  for (auto& w : c.widths) w = 2 + rng() % 3;
  c.input_side = c.grid << stages;
  const std::size_t taps[] = {1, 2, 3, 5};
  c.blur_taps = taps[rng() % 4];
  return c;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  GradTally tally;
  std::map<std::string, std::size_t> per_path;
  plc::testing::GradCheckOptions opt;
  opt.kink_margin = 1e-4;
  opt.roundoff_tolerance = 1e-4;

  auto until = [&](const std::string& path, std::size_t want, const std::function<void(std::uint64_t)>& body) {
    for (std::uint64_t s = 0; per_path[path] < want && s < 20 * want; ++s) {
      const std::size_t before = tally.accepted;
      opt.seed = rng();
      body(rng());
      per_path[path] += tally.accepted - before;
    }
  };

  until("backbone", 30, [&](std::uint64_t seed) {
    const BackboneConfig bc = random_backbone(rng);
    Backbone net(bc, seed);
    const std::size_t N = 1 + rng() % 2;
    Tensor x = random_tensor({N, 1, bc.input_side, bc.input_side}, seed + 1, -1, 1, true);
    const Tensor mix = random_tensor({N, bc.classes, bc.grid, bc.grid}, seed + 2);
    auto inputs = net.parameters();
    inputs.push_back({"x", x});
    record(tally,
           plc::testing::gradcheck([&] { return ops::sum(ops::hadamard(net.forward(x, Mode::kTrain), mix)); },
                                   inputs, opt),
           "backbone");
  });

  until("crf", 30, [&](std::uint64_t seed) {
    const std::size_t P = 3 + rng() % 3, K = 1 + rng() % 3;
    BackboneConfig bc;
    bc.grid = P;
    bc.classes = K;
    bc.widths = {3};
    bc.input_side = 2 * P;
    CrfConfig cc;
    cc.window = rng() % 2 ? 3 : 5;
    cc.iterations = 1 + rng() % 3;
    cc.feature_dim = 1 + rng() % 3;
    cc.bandwidth = 0.5 + (rng() % 100) / 100.0;
    PacCrf crf(cc, bc, seed);
    fill(crf.compatibility(), random_tensor(crf.compatibility().shape(), seed + 1));
    const std::size_t N = 1 + rng() % 2;
    Tensor p = random_tensor({N, K, P, P}, seed + 2, 0.05, 0.95, true);
    const Tensor x = random_tensor({N, 1, 2 * P, 2 * P}, seed + 3);
    const Tensor mix = random_tensor({N, K, P, P}, seed + 4);
    auto inputs = crf.parameters();
    inputs.push_back({"p", p});
    record(tally,
           plc::testing::gradcheck(
               [&] { return ops::sum(ops::hadamard(crf.refine(p, crf.compute_features(x, Mode::kTrain)), mix)); },
               inputs, opt),
           "crf");
  });

  for (LossFamily fam : {LossFamily::kRelu, LossFamily::kSigmoid, LossFamily::kBaseline}) {
    const std::string path = "loss-" + to_string(fam);
    until(path, 15, [&](std::uint64_t seed) {
      const std::size_t N = 1 + rng() % 3, K = 1 + rng() % 3, P = 2 + rng() % 3;
      std::vector<Annotation> anns;
      for (std::size_t n = 0; n < N; ++n) anns.push_back(random_annotation(K, P, rng));
      std::vector<const Annotation*> ptrs;
      for (const auto& a : anns) ptrs.push_back(&a);
      const BatchTargets t = make_targets(ptrs, P);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      ThresholdSet th = ThresholdSet::uniform(K);
      LossConfig cfg;
      cfg.family = fam;
      cfg.lambda_ann = 1.0 + 99.0 * u(rng);
      for (auto& c : th.classes) {
        c = {0.3 + 0.6 * u(rng), 0.3 * u(rng), u(rng) * P * P, u(rng) * P * P};
        cfg.gamma.push_back(0.05 + 0.95 * u(rng));
      }
      Tensor z = random_tensor({N, K, P, P}, seed, 0.02, 0.98, true);
      auto o = opt;
      o.coords_per_tensor = N * K * P * P;
      record(tally, plc::testing::gradcheck([&] { return batch_loss(z, t, th, cfg).total; }, {{"z", z}}, o),
             path);
    });
  }

  until("end-to-end", 15, [&](std::uint64_t seed) {
    BackboneConfig bc;
    bc.grid = 3;
    bc.classes = 2;
    bc.widths = {3, 3};
    bc.input_side = 12;
    Backbone net(bc, seed);
    CrfConfig cc;
    cc.window = 3;
    cc.iterations = 2;
    cc.feature_dim = 2;
    PacCrf crf(cc, bc, seed + 1);
    fill(crf.compatibility(), random_tensor(crf.compatibility().shape(), seed + 2));
    const std::size_t N = 2;
    const Tensor x = random_tensor({N, 1, 12, 12}, seed + 3);
    std::vector<Annotation> anns;
    for (std::size_t n = 0; n < N; ++n) anns.push_back(random_annotation(2, 3, rng));
    std::vector<const Annotation*> ptrs;
    for (const auto& a : anns) ptrs.push_back(&a);
    const BatchTargets t = make_targets(ptrs, 3);
    const ThresholdSet th = ThresholdSet::uniform(2, {0.6, 0.1, 3.5, 2.5});
    LossConfig cfg;
    cfg.gamma = {0.5, 0.8};
    auto inputs = net.parameters();
    for (const auto& p : crf.parameters()) inputs.push_back(p);
    record(tally,
           plc::testing::gradcheck(
               [&] {
                 const Tensor p = net.forward(x, Mode::kTrain);
                 return batch_loss(crf.refine(p, crf.compute_features(x, Mode::kTrain)), t, th, cfg).total;
               },
               inputs, opt),
           "end-to-end");
  });

  const double elapsed = seconds_since(t0);
  bool all_paths = true;
  std::string paths;
  for (const auto& [name, n] : per_path) {
    all_paths = all_paths && n > 0;
    paths += " " + name + "=" + std::to_string(n);
  }
  Outcome o;
  o.pass = tally.accepted >= 100 && all_paths && tally.worst <= 1e-4 && elapsed < 120.0;
  o.detail = std::to_string(tally.accepted) + " configs (" + std::to_string(tally.rejected) +
             " rejected near breakpoints," + paths + "), " + std::to_string(tally.coords) +
             " coords, max rel err " + fmt(tally.worst, 3) + ", " + fmt(elapsed, 3) + " s";
  if (tally.worst > 1e-4) o.detail += "; worst " + tally.worst_where;
  return o;
}

// ---- 2: stability ----------------------------------------------------------

Outcome stability() {
  const std::vector<std::size_t> grids{1, 2, 5, 10, 20};
  const std::vector<double> ps{0.1, 0.3, 0.5, 0.9};
  const auto rows = stability_report(grids, ps, {Precision::kF32, Precision::kF64});
  std::size_t mismatches = 0, underflows = 0;
  double max_eq9 = 0.0, max_eq10_pos = 0.0, max_eq10_neg = 0.0;
  bool finite = true, anchors = false;
  double anchor_err = 0.0;
  for (const auto& r : rows) {
    const double cells = static_cast<double>(r.grid * r.grid);
    const double log_prob = cells * std::log(r.p_value);
    const double log_tiny = r.precision == Precision::kF32
                                ? std::log(static_cast<double>(std::numeric_limits<float>::denorm_min()))
                                : std::log(std::numeric_limits<double>::denorm_min());
    const bool oracle_underflow = log_prob < log_tiny;
    if (oracle_underflow != r.underflow) ++mismatches;
    underflows += r.underflow;
    anchor_err = std::max(anchor_err, std::abs(r.eq1_logdomain + log_prob) / std::abs(log_prob));

    const PatchScores z(r.grid, 1, r.p_value);
    const double pos = relu_un_loss(z, 0, true, 2.0, 2.0, 1.0);
    const double neg = relu_un_loss(z, 0, false, 2.0, 2.0, 1.0);
    finite = finite && std::isfinite(r.eq9_loss) && std::isfinite(pos) && std::isfinite(neg);
    max_eq9 = std::max(max_eq9, r.eq9_loss);
    max_eq10_pos = std::max(max_eq10_pos, pos);
    max_eq10_neg = std::max(max_eq10_neg, neg);
  }
  // The two headline cases.
  bool f64_01 = false, f32_05 = false;
  for (const auto& r : rows) {
    if (r.grid != 20) continue;
    if (r.p_value == 0.1 && r.precision == Precision::kF64) {
      f64_01 = r.underflow && std::abs(r.eq1_logdomain - 400.0 * std::log(10.0)) <= 1e-9 * 921.0;
    }
    if (r.p_value == 0.5 && r.precision == Precision::kF32) {
      f32_05 = r.underflow && std::abs(-r.eq1_logdomain - 400.0 * std::log(0.5)) <= 1e-9 * 277.0;
    }
  }
  anchors = f64_01 && f32_05;
  Outcome o;
  o.pass = mismatches == 0 && anchors && finite && max_eq9 <= 2.0 && max_eq10_pos <= 2.0 &&
           anchor_err <= 1e-12;
  o.detail = std::to_string(rows.size()) + " rows, " + std::to_string(underflows) +
             " underflows, flag mismatches " + std::to_string(mismatches) + ", anchors " +
             (anchors ? "ok" : "WRONG") + ", log-domain rel err " + fmt(anchor_err, 3) +
             ", max relu-ann " + fmt(max_eq9) + ", max relu-un positive " + fmt(max_eq10_pos) +
             " (negative branch finite, max " + fmt(max_eq10_neg) + ")";
  return o;
}

// ---- 3: zero-loss satisfiability -------------------------------------------

Outcome satisfiability() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t ann_bad = 0, un_bad = 0, ann_zero = 0, un_zero = 0, ann_ties = 0;
  const std::size_t n = 10000;
  // Quantized draws make exact ties between a sum and its threshold common.
  auto draw = [&](bool quantized) { return quantized ? (rng() % 9) / 8.0 : u(rng); };
  for (std::size_t it = 0; it < n; ++it) {
    const std::size_t P = 2 + rng() % 4;
    const bool q = it % 2 == 0;
    PatchScores z(P, 1);
    for (std::size_t c = 0; c < P * P; ++c) z.at(c, 0) = draw(q);
    PatchMask box(P);
    while (box.empty() || box.count() == P * P) {
      box = PatchMask(P);
      for (std::size_t c = 0; c < P * P; ++c) box.set(c, rng() % 2 == 1);
    }
    const PatchMask comp = box.complement();
    double inside = 0.0, outside = 0.0;
    for (std::size_t c = 0; c < P * P; ++c) (box.get(c) ? inside : outside) += z.at(c, 0);
    const double nb = static_cast<double>(box.count()), nc = static_cast<double>(comp.count());
    double tau = draw(q), rho = draw(q);
    if (it % 5 == 0) tau = inside / nb;  // on the boundary
    if (it % 7 == 0) rho = outside / nc;
    // tau * |b| is exact in long double (53 + 6 bits of mantissa).
    const long double need = static_cast<long double>(tau) * nb;
    const long double allow = static_cast<long double>(rho) * nc;
    ann_ties += need == inside;
    const bool ann_ok = need <= inside && outside <= allow;
    const double la = relu_ann_loss(z, 0, box, tau, rho);
    ann_zero += la == 0.0;
    if ((la == 0.0) != ann_ok) ++ann_bad;

    const double cells = static_cast<double>(P * P);
    const double total = inside + outside;
    double tau_hat = draw(q) * cells, rho_hat = draw(q) * cells;
    if (it % 3 == 0) tau_hat = rho_hat = total;
    const bool y = rng() % 2 == 1;
    double all = 0.0;
    for (std::size_t c = 0; c < P * P; ++c) all += z.at(c, 0);
    const bool un_ok = y ? tau_hat <= all : all <= rho_hat;
    const double lu = relu_un_loss(z, 0, y, tau_hat, rho_hat, 0.05 + u(rng));
    un_zero += lu == 0.0;
    if ((lu == 0.0) != un_ok) ++un_bad;
  }
  Outcome o;
  o.pass = ann_bad == 0 && un_bad == 0;
  o.detail = std::to_string(n) + " instances; annotated mismatches " + std::to_string(ann_bad) + " (" +
             std::to_string(ann_zero) + " zero, " + std::to_string(ann_ties) +
             " exact ties), unannotated mismatches " + std::to_string(un_bad) + " (" +
             std::to_string(un_zero) + " zero)";
  return o;
}

// ---- 4: CRF identity and smoothing ------------------------------------------

std::size_t sign_flips(const Tensor& z, std::size_t P) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < P; ++r)
    for (std::size_t c = 0; c < P; ++c) {
      const bool here = z[r * P + c] >= 0.5;
      if (c + 1 < P && here != (z[r * P + c + 1] >= 0.5)) ++n;
      if (r + 1 < P && here != (z[(r + 1) * P + c] >= 0.5)) ++n;
    }
  return n;
}

Outcome crf_checks() {
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (std::size_t it = 0; it < 100; ++it) {
    const std::size_t P = 2 + rng() % 9, K = 1 + rng() % 6, N = 1 + rng() % 2;
    BackboneConfig bc;
    bc.grid = P;
    bc.classes = K;
    bc.widths = {4};
    bc.input_side = 2 * P;
    CrfConfig cc;
    cc.window = std::min<std::size_t>(2 * (1 + rng() % 3) + 1, 2 * P - 1);
    cc.iterations = 1 + rng() % 6;
    PacCrf crf(cc, bc, rng());
    const Tensor p = random_tensor({N, K, P, P}, rng(), 1e-3, 1.0 - 1e-3);
    const Tensor x = random_tensor({N, 1, 2 * P, 2 * P}, rng());
    const Tensor z = crf.refine(p, crf.compute_features(x, Mode::kInfer));
    for (std::size_t i = 0; i < z.numel(); ++i) worst = std::max(worst, std::abs(z[i] - p[i]));
  }

  const std::size_t P = 4;
  BackboneConfig bc;
  bc.grid = P;
  bc.classes = 1;
  bc.widths = {4};
  bc.input_side = 2 * P;
  CrfConfig cc;
  cc.window = 3;
  cc.feature_dim = 2;
  PacCrf crf(cc, bc, 11);
  std::vector<double> pv(P * P);
  for (std::size_t r = 0; r < P; ++r)
    for (std::size_t c = 0; c < P; ++c) pv[r * P + c] = (r + c) % 2 ? 0.3 : 0.7;
  const Tensor p({1, 1, P, P}, pv);
  auto w = crf.compatibility().mutable_data();
  for (std::size_t off : {1, 3, 5, 7}) w[off] = -1.0;  // the four adjacent offsets
  const Tensor z = crf.refine(p, PatchFeatures{Tensor({1, 2, P, P}, 0.0), {}});
  const std::size_t before = sign_flips(p, P), after = sign_flips(z, P);

  Outcome o;
  o.pass = worst <= 1e-9 && after < before;
  o.detail = "W=0 max|z-p| " + fmt(worst, 3) + " over 100 grids; checkerboard flips " +
             std::to_string(before) + " -> " + std::to_string(after);
  return o;
}

// ---- 5: anti-aliasing -------------------------------------------------------

Outcome anti_aliasing(const Dataset& images) {
  std::size_t better = 0;
  double sum_blur = 0.0, sum_plain = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    Backbone net(BackboneConfig{}, 500 + s);
    const Tensor x = images.images({static_cast<std::size_t>(s)});
    const double blur = shift_sensitivity(net, x, 3);
    const double plain = shift_sensitivity(net, x, 1);
    sum_blur += blur;
    sum_plain += plain;
    better += blur < plain;
  }
  Outcome o;
  o.pass = better >= 16 && sum_blur < sum_plain;
  o.detail = "blur better in " + std::to_string(better) + "/20 seeds, mean " + fmt(sum_blur / 20) +
             " vs " + fmt(sum_plain / 20) + " without blur";
  return o;
}

// ---- 6: metric oracle ---------------------------------------------------------

Outcome metric_oracle() {
  std::mt19937_64 rng(606);
  const std::size_t P = 3;
  std::size_t checked = 0, mismatches = 0;
  for (std::size_t b = 0; b < 20; ++b) {
    std::set<std::size_t> box_cells;
    while (box_cells.empty())
      for (std::size_t c = 0; c < 9; ++c)
        if (rng() % 2 == 1) box_cells.insert(c);
    PatchMask box(P);
    for (auto c : box_cells) box.set(c);
    for (std::size_t bits = 0; bits < 512; ++bits) {
      std::set<std::size_t> region_cells;
      PatchScores z(P, 1, 0.0);
      for (std::size_t c = 0; c < 9; ++c) {
        if (bits >> c & 1U) {
          region_cells.insert(c);
          z.at(c, 0) = 0.5 + 0.5 * static_cast<double>(rng() % 2);
        } else {
          z.at(c, 0) = 0.49 * static_cast<double>(rng() % 2);
        }
      }
      std::set<std::size_t> inter, uni;
      std::set_intersection(region_cells.begin(), region_cells.end(), box_cells.begin(), box_cells.end(),
                            std::inserter(inter, inter.end()));
      std::set_union(region_cells.begin(), region_cells.end(), box_cells.begin(), box_cells.end(),
                     std::inserter(uni, uni.end()));
      const double iou = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
      const double ior = region_cells.empty()
                             ? 0.0
                             : static_cast<double>(inter.size()) / static_cast<double>(region_cells.size());
      const Overlap got = iou_ior(detect_region(z, 0), box);
      ++checked;
      if (got.iou != iou || got.ior != ior) ++mismatches;
    }
  }
  Outcome o;
  o.pass = mismatches == 0;
  o.detail = std::to_string(checked) + " region/box pairs, " + std::to_string(mismatches) + " mismatches";
  return o;
}

// ---- 7, 8, 10: training runs ---------------------------------------------------

struct Workspace {
  fs::path root;
  fs::path calibration;

  fs::path default_data() const { return root / "data_default"; }
  fs::path noisy_data() const { return root / "data_noisy"; }

  RunConfig config(const fs::path& data) const {
    RunConfig c;
    c.dataset = data.string();
    return c;
  }
};

struct DefaultRun {
  bool done = false;
  TrainReport report;
  double seconds = 0.0;
  fs::path dir;
};

std::optional<double> class_mean(const FoldSummary& s, std::size_t k) { return s.iou.at(k).mean; }

void ensure_default_run(const Workspace& ws, DefaultRun& run) {
  if (run.done) return;
  run.dir = ws.root / "run_default";
  fs::remove_all(run.dir);
  const auto t0 = Clock::now();
  run.report = cmd_train(ws.config(ws.default_data()), run.dir, Logger{});
  run.seconds = seconds_since(t0);
  run.done = true;
}

Outcome end_to_end(const Workspace& ws, DefaultRun& run) {
  const RunConfig cfg = ws.config(ws.default_data());
  ensure_default_run(ws, run);

  RunConfig untrained = cfg;
  untrained.train.phase1_epochs = 0;
  untrained.train.phase2_epochs = 0;
  const fs::path base_dir = ws.root / "run_untrained";
  fs::remove_all(base_dir);
  const TrainReport base = cmd_train(untrained, base_dir, Logger{});

  const auto cal = read_calibration(ws.calibration);
  const double bar = cal.count("default_mean_iou_bar") ? std::stod(cal.at("default_mean_iou_bar")) : 0.80;
  const double acc = run.report.summaries.at(0).mean_iou.value_or(0.0);
  const double floor = base.summaries.at(0).mean_iou.value_or(0.0);
  Outcome o;
  o.pass = acc >= 0.5 && acc > floor && acc >= bar && run.seconds < 1800.0;
  o.detail = "mean IoU accuracy at T=0.1 " + fmt(acc) + " over " + std::to_string(run.report.folds.size()) +
             " folds (calibrated bar " + fmt(bar) + ", untrained " + fmt(floor) + "), " +
             fmt(run.seconds, 4) + " s";
  return o;
}

Outcome directional(const Workspace& ws) {
  RunConfig cfg = ws.config(ws.noisy_data());
  const fs::path out = ws.root / "run_compare";
  fs::remove_all(out);
  const std::vector<Arm> arms{parse_arm("relu:loss=relu"), parse_arm("baseline:loss=baseline"),
                              parse_arm("annonly:loss=relu,unannotated=0")};
  const CompareReport cmp = cmd_compare(cfg, arms, out, Logger{});
  const FoldSummary& relu = cmp.reports.at(0).summaries.at(0);
  const FoldSummary& baseline = cmp.reports.at(1).summaries.at(0);
  const FoldSummary& annonly = cmp.reports.at(2).summaries.at(0);

  // Few-annotated classes: boxed classes whose annotated count is at most
  // the median over boxed classes.
  const Dataset data = load(cfg.dataset, cfg.backbone.grid);
  std::vector<std::size_t> counts(data.classes, 0);
  for (const auto& s : data.samples)
    for (std::size_t k = 0; k < data.classes; ++k) counts[k] += s.ann.annotated[k];
  std::vector<std::size_t> boxed;
  for (std::size_t k = 0; k < data.classes; ++k)
    if (counts[k] > 0) boxed.push_back(k);
  std::vector<std::size_t> sorted;
  for (auto k : boxed) sorted.push_back(counts[k]);
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.empty() ? 0.0
                                       : 0.5 * static_cast<double>(sorted[(sorted.size() - 1) / 2] +
                                                                   sorted[sorted.size() / 2]);
  double with_un = 0.0, without_un = 0.0;
  std::size_t few = 0;
  std::string few_list;
  for (auto k : boxed) {
    if (static_cast<double>(counts[k]) > median) continue;
    const auto a = class_mean(relu, k), b = class_mean(annonly, k);
    if (!a || !b) continue;
    with_un += *a;
    without_un += *b;
    ++few;
    few_list += (few_list.empty() ? "" : ",") + std::to_string(k) + "(" + std::to_string(counts[k]) + ")";
  }
  if (few > 0) {
    with_un /= static_cast<double>(few);
    without_un /= static_cast<double>(few);
  }
  const double r = relu.mean_iou.value_or(0.0), b = baseline.mean_iou.value_or(0.0);
  Outcome o;
  o.pass = r >= b && few > 0 && with_un >= without_un;
  o.detail = "relu " + fmt(r) + " vs baseline " + fmt(b) + "; few-annotated classes " + few_list +
             " with unannotated " + fmt(with_un) + " vs annotated only " + fmt(without_un);
  return o;
}

Outcome determinism(const Workspace& ws, const DefaultRun& first) {
  const RunConfig cfg = ws.config(ws.default_data());
  const fs::path again = ws.root / "run_default_again";
  fs::remove_all(again);
  cmd_train(cfg, again, Logger{});
  std::size_t files = 0, differ = 0;
  std::string first_diff;
  for (const auto& e : fs::recursive_directory_iterator(first.dir)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name != "checkpoint.plck" && name != "train_log.csv" && name != "thresholds.csv") continue;
    const fs::path rel = fs::relative(e.path(), first.dir);
    ++files;
    if (!fs::exists(again / rel) || slurp(e.path()) != slurp(again / rel)) {
      ++differ;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  Outcome o;
  o.pass = files > 0 && differ == 0;
  o.detail = std::to_string(files) + " checkpoint/log files compared byte for byte, " +
             std::to_string(differ) + " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")");
  return o;
}

// ---- 9: threshold fitting ---------------------------------------------------

// Largest t with sum max(0, t - v) <= eps, found by evaluating the hinge total
// at every sample and closing the form on the last admissible segment.
double oracle_largest(const std::vector<double>& v, double eps) {
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  std::size_t best = 0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    double h = 0.0;
    for (double x : s) h += std::max(0.0, s[j] - x);
    if (h <= eps) best = j;
  }
  std::size_t m = best + 1;
  while (m < s.size() && s[m] == s[best]) ++m;
  double prefix = 0.0;
  for (std::size_t i = 0; i < m; ++i) prefix += s[i];
  return (eps + prefix) / static_cast<double>(m);
}

double oracle_smallest(const std::vector<double>& v, double eps) {
  std::vector<double> s = v;
  std::sort(s.begin(), s.end(), std::greater<>());
  std::size_t best = 0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    double h = 0.0;
    for (double x : s) h += std::max(0.0, x - s[j]);
    if (h <= eps) best = j;
  }
  std::size_t m = best + 1;
  while (m < s.size() && s[m] == s[best]) ++m;
  double prefix = 0.0;
  for (std::size_t i = 0; i < m; ++i) prefix -= s[i];
  return -((eps + prefix) / static_cast<double>(m));
}

std::vector<double> random_values(std::mt19937_64& rng, double hi) {
  std::uniform_real_distribution<double> u(0.0, hi);
  std::vector<double> v(rng() % 25);
  for (auto& x : v) x = u(rng);
  // Duplicates exercise ties.
  for (std::size_t i = 1; i < v.size(); ++i)
    if (rng() % 4 == 0) v[i] = v[rng() % i];
  return v;
}

Outcome threshold_fitting(const Workspace& ws, DefaultRun& run) {
  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0, fields = 0;
  const double slacks[] = {0.0, 0.02, 0.1, 0.5, 2.0};
  for (std::size_t it = 0; it < 1000; ++it) {
    const std::size_t K = 1 + rng() % 4, P = 2 + rng() % 19;
    const double cells = static_cast<double>(P * P);
    ThresholdFitConfig cfg;
    cfg.slack_fraction = slacks[rng() % 5];
    std::vector<ClassSums> sums(K);
    ThresholdSet prev = ThresholdSet::uniform(K);
    for (std::size_t k = 0; k < K; ++k) {
      sums[k] = {random_values(rng, cells), random_values(rng, cells), random_values(rng, 1.0),
                 random_values(rng, 1.0)};
      prev.classes[k] = {u(rng), u(rng), u(rng) * cells, u(rng) * cells};
    }
    const FitResult got = fit_thresholds(sums, prev, cfg, P);
    for (std::size_t k = 0; k < K; ++k) {
      const ClassSums& s = sums[k];
      auto eps = [&](const std::vector<double>& v) { return cfg.slack_fraction * static_cast<double>(v.size()); };
      auto clip = [](double x, double lo, double hi) { return std::min(std::max(x, lo), hi); };
      const ClassThresholds& p = prev.classes[k];
      const double tau_hat = s.positive.empty() ? p.tau_hat : clip(oracle_largest(s.positive, eps(s.positive)), 1.0, cells);
      const double rho_hat = s.negative.empty() ? p.rho_hat : clip(oracle_smallest(s.negative, eps(s.negative)), 0.0, 0.25 * cells);
      const double tau = s.inside.empty() ? p.tau : clip(oracle_largest(s.inside, eps(s.inside)), 0.5, 1.0);
      const double rho = s.outside.empty() ? p.rho : clip(oracle_smallest(s.outside, eps(s.outside)), 0.0, 0.1);
      const ClassThresholds& g = got.thresholds.classes[k];
      fields += 8;
      mismatches += (g.tau_hat != tau_hat) + (g.rho_hat != rho_hat) + (g.tau != tau) + (g.rho != rho);
      mismatches += (got.kept_tau_hat[k] != s.positive.empty()) + (got.kept_rho_hat[k] != s.negative.empty()) +
                    (got.kept_tau[k] != s.inside.empty()) + (got.kept_rho[k] != s.outside.empty());
    }
  }

  // Degeneracy direction on a trained fold: unbounded descent from the
  // bounded fit, on the frozen network's sums.
  ensure_default_run(ws, run);
  const RunConfig cfg = ws.config(ws.default_data());
  const Dataset data = load(cfg.dataset, cfg.backbone.grid);
  const FoldPlan plan = plan_folds(data, cfg);
  Model model(cfg);
  model.load(run.dir / "fold_0" / "checkpoint.plck");
  const auto ids = training_ids(data, plan, 0, cfg.train.unannotated_fraction, cfg.train.seed);
  std::vector<ClassSums> sums;
  for (std::size_t b = 0; b < ids.size(); b += 64) {
    const std::vector<std::size_t> idx(ids.begin() + b, ids.begin() + std::min(ids.size(), b + 64));
    append_sums(sums, model.predict(data.images(idx)), data.annotations(idx));
  }
  const std::size_t P = cfg.backbone.grid;
  const double cells = static_cast<double>(P * P);
  const ThresholdSet bounded = fit_thresholds(sums, model.thresholds, cfg.thresholds, P).thresholds;
  ThresholdFitConfig diag = cfg.thresholds;
  diag.diagnostic = true;
  diag.diagnostic_steps = 5000;  // enough to stop moving on these sums
  const ThresholdSet loose = descend_thresholds(sums, bounded, class_balance(data, ids), diag, P);
  std::size_t classes = 0, toward = 0;
  double tau_hat_sum = 0.0, rho_hat_sum = 0.0, tau_hat_b = 0.0, rho_hat_b = 0.0;
  for (std::size_t k = 0; k < sums.size(); ++k) {
    if (sums[k].positive.empty() || sums[k].negative.empty()) continue;
    ++classes;
    const auto& a = bounded.classes[k];
    const auto& d = loose.classes[k];
    const double min_pos = *std::min_element(sums[k].positive.begin(), sums[k].positive.end());
    const double max_neg = *std::max_element(sums[k].negative.begin(), sums[k].negative.end());
    const bool down = d.tau_hat < a.tau_hat && d.tau_hat <= min_pos;
    const bool up = d.rho_hat > a.rho_hat && d.rho_hat >= max_neg;
    toward += down && up;
    tau_hat_sum += d.tau_hat;
    rho_hat_sum += d.rho_hat;
    tau_hat_b += a.tau_hat;
    rho_hat_b += a.rho_hat;
  }
  const double c = std::max<std::size_t>(classes, 1);
  Outcome o;
  o.pass = mismatches == 0 && classes > 0 && toward == classes;
  o.detail = "1000 instances, " + std::to_string(mismatches) + "/" + std::to_string(fields) +
             " fields differ from the sort-and-scan oracle; unbounded mode moved " + std::to_string(toward) +
             "/" + std::to_string(classes) + " classes toward degeneracy (mean tau_hat " + fmt(tau_hat_b / c) +
             " -> " + fmt(tau_hat_sum / c) + ", mean rho_hat " + fmt(rho_hat_b / c) + " -> " +
             fmt(rho_hat_sum / c) + ", P^2 = " + fmt(cells) + ")";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  // Same allocator settings as the CLI: training allocates tens of MB per op.
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1024 << 20);
  CLI::App app{"Acceptance suite"};
  std::string work = (fs::temp_directory_path() / "plc_acceptance").string();
  std::string calibration;
  std::string report_path;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for generated data and runs");
  app.add_option("--calibration", calibration, "Calibration record");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--report", report_path, "Also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  Workspace ws{work, calibration};
  fs::create_directories(ws.root);
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  const char* names[] = {"",
                         "gradient suite",
                         "numerical stability",
                         "zero-loss satisfiability",
                         "crf identity and smoothing",
                         "anti-aliasing",
                         "metric oracle",
                         "end-to-end localization",
                         "directional comparison",
                         "threshold fitting",
                         "determinism"};
  DefaultRun run;
  int failures = 0;
  std::ofstream report_file;
  if (!report_path.empty()) report_file.open(report_path);
  auto report = [&](int n, const std::function<Outcome()>& fn) {
    if (!wanted(n)) return;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    char line[2048];
    std::snprintf(line, sizeof line, "%s %2d %-27s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", n, names[n],
                  o.detail.c_str(), seconds_since(t0));
    std::fputs(line, stdout);
    std::fflush(stdout);
    if (report_file) report_file << line << std::flush;
  };

  const bool needs_default = wanted(5) || wanted(7) || wanted(9) || wanted(10);
  if (needs_default) {
    fs::remove_all(ws.default_data());
    generate(SynthConfig{}, ws.default_data());
  }
  if (wanted(8)) {
    SynthConfig noisy;
    noisy.label_noise = 0.1;
    fs::remove_all(ws.noisy_data());
    generate(noisy, ws.noisy_data());
  }

  report(1, gradient_suite);
  report(2, stability);
  report(3, satisfiability);
  report(4, crf_checks);
  report(5, [&] { return anti_aliasing(load(ws.default_data(), 8)); });
  report(6, metric_oracle);
  report(7, [&] { return end_to_end(ws, run); });
  report(8, [&] { return directional(ws); });
  report(9, [&] { return threshold_fitting(ws, run); });
  report(10, [&] {
    ensure_default_run(ws, run);
    return determinism(ws, run);
  });
  std::printf("%d failure(s)\n", failures);
  if (report_file) report_file << failures << " failure(s)\n";
  return failures == 0 ? 0 : 1;
}
