#include "plc/runner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

#include "plc/checkpoint.hpp"
#include "plc/error.hpp"

namespace plc {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(key, trim(item)));
  if (out.empty()) throw ConfigError("config: " + key + " expects a comma-separated list");
  return out;
}

// Fisher-Yates with an explicit draw pattern so orders are reproducible
// across standard libraries.
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  using Setter = std::function<void(const std::string&)>;
  auto sz = [&](std::size_t& field) {
    return Setter([&field, key](const std::string& v) {
      field = static_cast<std::size_t>(to_u64(key, v));
    });
  };
  auto dbl = [&](double& field) {
    return Setter([&field, key](const std::string& v) { field = to_double(key, v); });
  };
  auto u64 = [&](std::uint64_t& field) {
    return Setter([&field, key](const std::string& v) { field = to_u64(key, v); });
  };
  auto flag = [&](bool& field) {
    return Setter([&field, key](const std::string& v) { field = to_bool(key, v); });
  };
  const std::map<std::string, Setter> table{
      {"data.path", [this](const std::string& v) { dataset = v; }},
      {"backbone.input_side", sz(backbone.input_side)},
      {"backbone.grid", sz(backbone.grid)},
      {"backbone.classes", sz(backbone.classes)},
      {"backbone.blur_taps", sz(backbone.blur_taps)},
      {"backbone.widths",
       [this, key](const std::string& v) {
         backbone.widths.clear();
         for (double w : to_list(key, v)) {
           if (w < 1 || w != std::floor(w)) throw ConfigError("config: backbone.widths must be positive integers");
           backbone.widths.push_back(static_cast<std::size_t>(w));
         }
       }},
      {"crf.window", sz(crf.window)},
      {"crf.iterations", sz(crf.iterations)},
      {"crf.feature_dim", sz(crf.feature_dim)},
      {"crf.bandwidth", dbl(crf.bandwidth)},
      {"crf.clamp", dbl(crf.clamp)},
      {"loss.family", [this](const std::string& v) { loss.family = parse_loss_family(v); }},
      {"loss.lambda_ann", dbl(loss.lambda_ann)},
      {"loss.sigmoid_steepness", dbl(loss.sigmoid_steepness)},
      {"loss.log_floor", dbl(loss.log_floor)},
      {"loss.gamma",
       [this, key](const std::string& v) {
         fixed_gamma.clear();
         if (v != "auto") fixed_gamma = to_list(key, v);
       }},
      {"thresholds.tau_hat_min", dbl(thresholds.tau_hat_min)},
      {"thresholds.rho_hat_max", dbl(thresholds.rho_hat_max)},
      {"thresholds.tau_min", dbl(thresholds.tau_min)},
      {"thresholds.rho_max", dbl(thresholds.rho_max)},
      {"thresholds.slack_fraction", dbl(thresholds.slack_fraction)},
      {"thresholds.diagnostic", flag(thresholds.diagnostic)},
      {"thresholds.diagnostic_steps", sz(thresholds.diagnostic_steps)},
      {"thresholds.diagnostic_step", dbl(thresholds.diagnostic_step)},
      {"thresholds.init_tau", dbl(initial_thresholds.tau)},
      {"thresholds.init_rho", dbl(initial_thresholds.rho)},
      {"thresholds.init_tau_hat", dbl(initial_thresholds.tau_hat)},
      {"thresholds.init_rho_hat", dbl(initial_thresholds.rho_hat)},
      {"optim.lr", dbl(adam.learning_rate)},
      {"optim.weight_decay", dbl(adam.weight_decay)},
      {"optim.beta1", dbl(adam.beta1)},
      {"optim.beta2", dbl(adam.beta2)},
      {"optim.eps", dbl(adam.eps)},
      {"optim.lr_decay", dbl(adam.lr_decay)},
      {"optim.batch_size", sz(train.batch_size)},
      {"train.phase1_epochs", sz(train.phase1_epochs)},
      {"train.phase2_epochs", sz(train.phase2_epochs)},
      {"train.tolerance", dbl(train.tolerance)},
      {"train.patience", sz(train.patience)},
      {"train.alternate", flag(train.alternate)},
      {"train.folds", sz(train.folds)},
      {"train.fold_limit", sz(train.fold_limit)},
      {"train.seed", u64(train.seed)},
      {"train.unannotated_fraction", dbl(train.unannotated_fraction)},
      {"train.eval_batch", sz(train.eval_batch)},
      {"synth.image_side", sz(synth.image_side)},
      {"synth.grid", sz(synth.grid)},
      {"synth.classes", sz(synth.classes)},
      {"synth.boxed_classes", sz(synth.boxed_classes)},
      {"synth.images", sz(synth.images)},
      {"synth.annotated_fraction", dbl(synth.annotated_fraction)},
      {"synth.label_noise", dbl(synth.label_noise)},
      {"synth.presence", dbl(synth.presence)},
      {"synth.second_blob", dbl(synth.second_blob)},
      {"synth.sigma_min", dbl(synth.sigma_min)},
      {"synth.sigma_max", dbl(synth.sigma_max)},
      {"synth.seed", u64(synth.seed)},
      {"eval.T", [this, key](const std::string& v) { eval_T = to_list(key, v); }},
  };
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second(value);
}

void RunConfig::validate() const {
  backbone.validate();
  crf.validate(backbone.grid);
  thresholds.validate(backbone.grid);
  if (!(loss.lambda_ann > 0.0)) throw ConfigError("config: loss.lambda_ann must be positive");
  if (!fixed_gamma.empty()) {
    if (fixed_gamma.size() != backbone.classes) {
      throw ConfigError("config: loss.gamma needs one entry per class");
    }
    for (double g : fixed_gamma) {
      if (!(g > 0.0)) throw ConfigError("config: loss.gamma entries must be positive");
    }
  }
  if (!(adam.learning_rate > 0.0)) throw ConfigError("config: optim.lr must be positive");
  if (adam.weight_decay < 0.0) throw ConfigError("config: optim.weight_decay must be >= 0");
  if (!(adam.lr_decay > 0.0 && adam.lr_decay <= 1.0)) throw ConfigError("config: optim.lr_decay must lie in (0, 1]");
  if (train.batch_size == 0) throw ConfigError("config: optim.batch_size must be >= 1");
  if (train.eval_batch == 0) throw ConfigError("config: train.eval_batch must be >= 1");
  if (train.folds < 2) throw ConfigError("config: train.folds must be >= 2");
  if (!(train.unannotated_fraction >= 0.0 && train.unannotated_fraction <= 1.0)) {
    throw ConfigError("config: train.unannotated_fraction must lie in [0, 1]");
  }
  if (train.tolerance < 0.0) throw ConfigError("config: train.tolerance must be >= 0");
  const auto& t = initial_thresholds;
  const double cells = static_cast<double>(backbone.grid * backbone.grid);
  if (t.tau < 0 || t.tau > 1 || t.rho < 0 || t.rho > 1 || t.tau_hat < 0 || t.tau_hat > cells ||
      t.rho_hat < 0 || t.rho_hat > cells) {
    throw ConfigError("config: initial thresholds out of range");
  }
  for (double T : eval_T) {
    if (!(T > 0.0 && T <= 1.0)) throw ConfigError("config: eval.T entries must lie in (0, 1]");
  }
}

std::string RunConfig::to_json() const {
  json j;
  j["data"]["path"] = dataset;
  j["backbone"] = {{"input_side", backbone.input_side}, {"grid", backbone.grid},
                   {"classes", backbone.classes}, {"widths", backbone.widths},
                   {"blur_taps", backbone.blur_taps}};
  j["crf"] = {{"window", crf.window}, {"iterations", crf.iterations},
              {"feature_dim", crf.feature_dim}, {"bandwidth", crf.bandwidth}, {"clamp", crf.clamp}};
  j["loss"] = {{"family", to_string(loss.family)}, {"lambda_ann", loss.lambda_ann},
               {"sigmoid_steepness", loss.sigmoid_steepness}, {"log_floor", loss.log_floor}};
  if (fixed_gamma.empty()) {
    j["loss"]["gamma"] = "auto";
  } else {
    j["loss"]["gamma"] = fixed_gamma;
  }
  j["thresholds"] = {{"tau_hat_min", thresholds.tau_hat_min},
                     {"rho_hat_max", thresholds.resolved_rho_hat_max(backbone.grid)},
                     {"tau_min", thresholds.tau_min},
                     {"rho_max", thresholds.rho_max},
                     {"slack_fraction", thresholds.slack_fraction},
                     {"diagnostic", thresholds.diagnostic},
                     {"diagnostic_steps", thresholds.diagnostic_steps},
                     {"diagnostic_step", thresholds.diagnostic_step},
                     {"init_tau", initial_thresholds.tau},
                     {"init_rho", initial_thresholds.rho},
                     {"init_tau_hat", initial_thresholds.tau_hat},
                     {"init_rho_hat", initial_thresholds.rho_hat}};
  j["optim"] = {{"lr", adam.learning_rate}, {"weight_decay", adam.weight_decay},
                {"beta1", adam.beta1},      {"beta2", adam.beta2},
                {"eps", adam.eps},          {"lr_decay", adam.lr_decay},
                {"batch_size", train.batch_size}};
  j["train"] = {{"phase1_epochs", train.phase1_epochs}, {"phase2_epochs", train.phase2_epochs},
                {"tolerance", train.tolerance},         {"patience", train.patience},
                {"alternate", train.alternate},         {"folds", train.folds},
                {"fold_limit", train.fold_limit},       {"seed", train.seed},
                {"unannotated_fraction", train.unannotated_fraction},
                {"eval_batch", train.eval_batch}};
  j["synth"] = {{"image_side", synth.image_side}, {"grid", synth.grid},
                {"classes", synth.classes}, {"boxed_classes", synth.boxed_classes},
                {"images", synth.images}, {"annotated_fraction", synth.annotated_fraction},
                {"label_noise", synth.label_noise}, {"presence", synth.presence},
                {"second_blob", synth.second_blob}, {"sigma_min", synth.sigma_min},
                {"sigma_max", synth.sigma_max}, {"seed", synth.seed}};
  j["eval"]["T"] = eval_T;
  return j.dump(2) + "\n";
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void Logger::info(const std::string& msg) const {
  if (sink_) *sink_ << msg << '\n' << std::flush;
}

std::vector<std::string> class_names(std::size_t classes) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < classes; ++k) out.push_back("class" + std::to_string(k));
  return out;
}

// ---- model -----------------------------------------------------------------

Model::Model(const RunConfig& cfg)
    : backbone(cfg.backbone, cfg.train.seed),
      crf(cfg.crf, cfg.backbone, cfg.train.seed + 1),
      thresholds(ThresholdSet::uniform(cfg.backbone.classes, cfg.initial_thresholds)) {}

Tensor Model::predict(const Tensor& images) {
  const Tensor p = backbone.forward(images, Mode::kInfer);
  return crf.refine(p, crf.compute_features(images, Mode::kInfer));
}

std::vector<NamedTensor> Model::state() const {
  auto out = backbone.state();
  const auto c = crf.state();
  out.insert(out.end(), c.begin(), c.end());
  for (std::size_t k = 0; k < thresholds.classes.size(); ++k) {
    const auto& t = thresholds.classes[k];
    const std::string p = "thresholds." + std::to_string(k) + ".";
    out.push_back({p + "tau", Tensor(Shape{1}, t.tau)});
    out.push_back({p + "rho", Tensor(Shape{1}, t.rho)});
    out.push_back({p + "tau_hat", Tensor(Shape{1}, t.tau_hat)});
    out.push_back({p + "rho_hat", Tensor(Shape{1}, t.rho_hat)});
  }
  return out;
}

void Model::save(const fs::path& checkpoint) const { save_checkpoint(checkpoint, state()); }

void Model::load(const fs::path& checkpoint) {
  auto targets = state();
  restore_tensors(load_checkpoint(checkpoint), targets);
  std::size_t i = targets.size() - 4 * thresholds.classes.size();
  for (auto& t : thresholds.classes) {
    t.tau = targets[i++].tensor.item();
    t.rho = targets[i++].tensor.item();
    t.tau_hat = targets[i++].tensor.item();
    t.rho_hat = targets[i++].tensor.item();
  }
}

// ---- evaluation ------------------------------------------------------------

std::vector<SampleOverlap> score_samples(const Dataset& data, const std::vector<std::size_t>& ids,
                                         const Predictor& predict, std::size_t batch) {
  std::vector<SampleOverlap> out;
  for (std::size_t b = 0; b < ids.size(); b += batch) {
    const std::vector<std::size_t> idx(ids.begin() + b, ids.begin() + std::min(ids.size(), b + batch));
    const Tensor z = predict(data.images(idx), idx);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const PatchScores s = PatchScores::from_tensor(z, n);
      const Annotation& a = data.samples[idx[n]].ann;
      for (std::size_t k = 0; k < a.classes(); ++k) {
        if (!a.annotated[k]) continue;
        out.push_back({k, iou_ior(detect_region(s, k), a.boxes[k])});
      }
    }
  }
  return out;
}

Predictor oracle_predictor(const Dataset& data) {
  return [&data](const Tensor&, const std::vector<std::size_t>& ids) {
    std::vector<PatchScores> batch;
    for (std::size_t i : ids) {
      const Annotation& a = data.samples.at(i).ann;
      PatchScores s(data.grid, data.classes, 0.0);
      for (std::size_t k = 0; k < data.classes; ++k) {
        if (!a.annotated[k]) continue;
        for (std::size_t c = 0; c < s.cells(); ++c) s.at(c, k) = a.boxes[k].get(c) ? 1.0 : 0.0;
      }
      batch.push_back(std::move(s));
    }
    return PatchScores::to_tensor(batch);
  };
}

// ---- training --------------------------------------------------------------

FoldPlan plan_folds(const Dataset& data, const RunConfig& cfg) {
  return make_folds(data.annotated_ids(), cfg.train.folds, cfg.train.seed);
}

std::vector<std::size_t> training_ids(const Dataset& data, const FoldPlan& plan, std::size_t fold,
                                      double unannotated_fraction, std::uint64_t seed) {
  std::vector<std::size_t> pool = data.unannotated_ids();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  shuffle(pool, rng);
  const auto take = static_cast<std::size_t>(
      std::llround(unannotated_fraction * static_cast<double>(pool.size())));
  std::vector<std::size_t> ids = plan.train.at(fold);
  ids.insert(ids.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> class_balance(const Dataset& data, const std::vector<std::size_t>& ids) {
  std::vector<double> pos(data.classes, 0.0), neg(data.classes, 0.0);
  for (std::size_t i : ids) {
    for (std::size_t k = 0; k < data.classes; ++k) {
      (data.samples[i].ann.labels[k] ? pos[k] : neg[k]) += 1.0;
    }
  }
  std::vector<double> g(data.classes, 1.0);
  for (std::size_t k = 0; k < data.classes; ++k) {
    if (neg[k] > 0.0) g[k] = std::clamp(pos[k] / neg[k], 1e-3, 1.0);
  }
  return g;
}

namespace {

struct EpochStats {
  double loss = 0.0;
  std::vector<double> per_class;
};

class TrainLog {
 public:
  TrainLog(const fs::path& path, std::size_t classes) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot write " + path.string());
    out_ << "epoch,phase,loss";
    for (std::size_t k = 0; k < classes; ++k) out_ << ",loss_class" << k;
    out_ << '\n';
  }
  void row(std::size_t epoch, int phase, const EpochStats& s) {
    out_ << epoch << ',' << phase << ',' << fmt_double(s.loss);
    for (double v : s.per_class) out_ << ',' << fmt_double(v);
    out_ << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

std::vector<std::vector<std::size_t>> batches_for_epoch(const std::vector<std::size_t>& ids,
                                                        std::size_t batch, std::uint64_t seed) {
  std::vector<std::size_t> order = ids;
  std::mt19937_64 rng(seed);
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch)));
  }
  return out;
}

// Relative improvement below tolerance for `patience` consecutive epochs.
bool stalled(const std::vector<double>& history, double tol, std::size_t patience) {
  if (patience == 0 || history.size() < patience + 1) return false;
  for (std::size_t i = history.size() - patience; i < history.size(); ++i) {
    const double prev = history[i - 1];
    const double gain = (prev - history[i]) / std::max(std::abs(prev), 1e-12);
    if (gain >= tol) return false;
  }
  return true;
}

void refit(ThresholdSet& th, const std::vector<ClassSums>& sums, const RunConfig& cfg,
           const std::vector<double>& gamma) {
  if (cfg.thresholds.diagnostic) {
    th = descend_thresholds(sums, th, gamma, cfg.thresholds, cfg.backbone.grid);
  } else {
    th = fit_thresholds(sums, th, cfg.thresholds, cfg.backbone.grid).thresholds;
  }
}

void write_thresholds_csv(const fs::path& path, const ThresholdSet& th) {
  std::ostringstream os;
  os << "class,tau,rho,tau_hat,rho_hat\n";
  for (std::size_t k = 0; k < th.classes.size(); ++k) {
    const auto& t = th.classes[k];
    os << k << ',' << fmt_double(t.tau) << ',' << fmt_double(t.rho) << ','
       << fmt_double(t.tau_hat) << ',' << fmt_double(t.rho_hat) << '\n';
  }
  write_text(path, os.str());
}

std::vector<AccuracyTable> evaluate_model(Model& model, const Dataset& data,
                                          const std::vector<std::size_t>& test,
                                          const RunConfig& cfg) {
  const auto overlaps = score_samples(
      data, test, [&](const Tensor& x, const std::vector<std::size_t>&) { return model.predict(x); },
      cfg.train.eval_batch);
  std::vector<AccuracyTable> tables;
  for (double T : cfg.eval_T) tables.push_back(localization_accuracy(overlaps, data.classes, T));
  return tables;
}

}  // namespace

FoldResult train_fold(const RunConfig& cfg, const Dataset& data, const FoldPlan& plan,
                      std::size_t fold, const fs::path& dir, const Logger& log) {
  fs::create_directories(dir);
  const std::size_t K = cfg.backbone.classes;
  if (data.classes != K) {
    throw ConfigError("train: dataset has " + std::to_string(data.classes) + " classes, config " +
                      std::to_string(K));
  }
  if (data.side != cfg.backbone.input_side) throw ConfigError("train: dataset image side differs from backbone.input_side");
  const auto ids = training_ids(data, plan, fold, cfg.train.unannotated_fraction, cfg.train.seed);
  LossConfig lcfg = cfg.loss;
  lcfg.gamma = cfg.fixed_gamma.empty() ? class_balance(data, ids) : cfg.fixed_gamma;
  lcfg.validate(K);

  Model model(cfg);
  FoldResult result;
  result.fold = fold;
  result.checkpoint = dir / "checkpoint.plck";
  model.save(result.checkpoint);
  TrainLog train_log(dir / "train_log.csv", K);
  log.info("fold " + std::to_string(fold) + ": " + std::to_string(ids.size()) +
           " training samples, " + std::to_string(plan.test[fold].size()) + " held out");

  const auto fit_pass = [&](const std::function<Tensor(const Tensor&, const std::vector<std::size_t>&)>& scores) {
    std::vector<ClassSums> sums;
    for (std::size_t b = 0; b < ids.size(); b += cfg.train.eval_batch) {
      const std::vector<std::size_t> idx(ids.begin() + b, ids.begin() + std::min(ids.size(), b + cfg.train.eval_batch));
      append_sums(sums, scores(data.images(idx), idx), data.annotations(idx));
    }
    return sums;
  };

  // Phase 1: backbone on p. Phase 2: frozen backbone, CRF on z.
  std::vector<Tensor> cached_p;  // per training sample, [1,K,P,P]
  std::size_t epoch_counter = 0;
  for (int phase = 1; phase <= 2; ++phase) {
    const std::size_t budget = phase == 1 ? cfg.train.phase1_epochs : cfg.train.phase2_epochs;
    if (budget == 0) continue;
    std::vector<NamedTensor> params = phase == 1 ? model.backbone.parameters() : model.crf.parameters();
    Adam adam(params, cfg.adam);
    if (phase == 2) {
      cached_p.clear();
      for (std::size_t b = 0; b < ids.size(); b += cfg.train.eval_batch) {
        const std::vector<std::size_t> idx(ids.begin() + b, ids.begin() + std::min(ids.size(), b + cfg.train.eval_batch));
        const Tensor p = model.backbone.forward(data.images(idx), Mode::kInfer);
        for (std::size_t n = 0; n < idx.size(); ++n) {
          cached_p.push_back(PatchScores::to_tensor({PatchScores::from_tensor(p, n)}));
        }
      }
    }
    std::map<std::size_t, std::size_t> slot;  // sample id -> position in ids
    for (std::size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;
    std::vector<double> history;
    for (std::size_t e = 0; e < budget; ++e) {
      ++epoch_counter;
      EpochStats stats;
      stats.per_class.assign(K, 0.0);
      const auto batches = batches_for_epoch(ids, cfg.train.batch_size,
                                             cfg.train.seed * 1000003ULL + fold * 1009ULL + epoch_counter);
      try {
        for (const auto& idx : batches) {
          Tape tape;
          TapeScope scope(tape);
          const Tensor images = data.images(idx);
          Tensor z;
          if (phase == 1) {
            z = model.backbone.forward(images, Mode::kTrain);
          } else {
            std::vector<PatchScores> ps;
            for (std::size_t i : idx) ps.push_back(PatchScores::from_tensor(cached_p[slot[i]], 0));
            const Tensor p = PatchScores::to_tensor(ps);
            z = model.crf.refine(p, model.crf.compute_features(images, Mode::kTrain));
          }
          const BatchTargets targets = make_targets(data.annotations(idx), cfg.backbone.grid);
          const BatchLoss loss = batch_loss(z, targets, model.thresholds, lcfg);
          tape.backward(loss.total);
          adam.step();
          adam.zero_grad();
          const double w = static_cast<double>(idx.size()) / static_cast<double>(ids.size());
          stats.loss += loss.total.item() * w;
          for (std::size_t k = 0; k < K; ++k) stats.per_class[k] += loss.per_class[k] * w;
        }
        if (!std::isfinite(stats.loss)) throw NumericError("epoch loss is not finite");
      } catch (const NumericError& e) {
        throw NumericError("train fold " + std::to_string(fold) + " phase " + std::to_string(phase) +
                           " epoch " + std::to_string(epoch_counter) + ": " + e.what() +
                           " (last good checkpoint kept at " + result.checkpoint.string() + ")");
      }
      adam.end_epoch();
      train_log.row(epoch_counter, phase, stats);
      log.info("fold " + std::to_string(fold) + " phase " + std::to_string(phase) + " epoch " +
               std::to_string(epoch_counter) + " loss " + fmt_double(stats.loss));
      if (cfg.train.alternate) {
        const auto sums = phase == 1
            ? fit_pass([&](const Tensor& x, const std::vector<std::size_t>&) {
                return model.backbone.forward(x, Mode::kInfer);
              })
            : fit_pass([&](const Tensor& x, const std::vector<std::size_t>& idx) {
                std::vector<PatchScores> ps;
                for (std::size_t i : idx) ps.push_back(PatchScores::from_tensor(cached_p[slot[i]], 0));
                return model.crf.refine(PatchScores::to_tensor(ps), model.crf.compute_features(x, Mode::kInfer));
              });
        refit(model.thresholds, sums, cfg, lcfg.gamma);
      }
      model.save(result.checkpoint);
      history.push_back(stats.loss);
      if (phase == 1 && stalled(history, cfg.train.tolerance, cfg.train.patience)) {
        result.converged_phase1 = true;
        break;
      }
    }
    result.final_loss.push_back(history.empty() ? 0.0 : history.back());
  }
  write_thresholds_csv(dir / "thresholds.csv", model.thresholds);
  result.tables = evaluate_model(model, data, plan.test[fold], cfg);
  return result;
}

namespace {

std::size_t fold_count(const RunConfig& cfg) {
  return cfg.train.fold_limit == 0 ? cfg.train.folds : std::min(cfg.train.fold_limit, cfg.train.folds);
}

void summarize(TrainReport& report, const RunConfig& cfg) {
  report.summaries.clear();
  for (std::size_t t = 0; t < cfg.eval_T.size(); ++t) {
    std::vector<AccuracyTable> tables;
    for (const auto& f : report.folds) tables.push_back(f.tables[t]);
    report.summaries.push_back(summarize_folds(tables));
  }
}

}  // namespace

void write_metrics(const TrainReport& report, const RunConfig& cfg, std::size_t classes,
                   const fs::path& out) {
  fs::create_directories(out);
  const auto names = class_names(classes);
  std::ostringstream per_fold;
  per_fold << "fold,class,criterion,T,accuracy,n\n";
  for (const auto& f : report.folds) {
    for (const auto& table : f.tables) {
      std::ostringstream os;
      write_accuracy_csv(os, table, names);
      std::istringstream lines(os.str());
      std::string line;
      std::getline(lines, line);
      while (std::getline(lines, line)) per_fold << f.fold << ',' << line << '\n';
    }
  }
  write_text(out / "metrics_folds.csv", per_fold.str());
  for (std::size_t t = 0; t < cfg.eval_T.size(); ++t) {
    const auto& s = report.summaries.at(t);
    std::ostringstream csv;
    write_summary_csv(csv, s, names);
    std::ostringstream tag;
    tag << "T" << cfg.eval_T[t];
    write_text(out / ("metrics_" + tag.str() + ".csv"), csv.str());
    for (Criterion c : {Criterion::kIoU, Criterion::kIoR}) {
      BarSeries series{to_string(c) + " accuracy", {}};
      for (const auto& st : c == Criterion::kIoU ? s.iou : s.ior) series.values.push_back(st.mean);
      std::ostringstream svg;
      write_bar_svg(svg, to_string(c) + " localization accuracy, T=" + fmt_double(cfg.eval_T[t]), names,
                    {series});
      write_text(out / ("accuracy_" + to_string(c) + "_" + tag.str() + ".svg"), svg.str());
    }
  }
}

TrainReport cmd_train(const RunConfig& cfg, const fs::path& out, const Logger& log) {
  cfg.validate();
  fs::create_directories(out);
  write_text(out / "config.json", cfg.to_json());
  const Dataset data = load(cfg.dataset, cfg.backbone.grid);
  TrainReport report;
  report.plan = plan_folds(data, cfg);
  for (std::size_t f = 0; f < fold_count(cfg); ++f) {
    report.folds.push_back(train_fold(cfg, data, report.plan, f, out / ("fold_" + std::to_string(f)), log));
  }
  summarize(report, cfg);
  write_metrics(report, cfg, data.classes, out);
  return report;
}

TrainReport cmd_eval(const RunConfig& cfg, const fs::path& run_dir, const fs::path& out,
                     const Logger& log) {
  cfg.validate();
  const Dataset data = load(cfg.dataset, cfg.backbone.grid);
  TrainReport report;
  report.plan = plan_folds(data, cfg);
  for (std::size_t f = 0; f < fold_count(cfg); ++f) {
    Model model(cfg);
    FoldResult r;
    r.fold = f;
    r.checkpoint = run_dir / ("fold_" + std::to_string(f)) / "checkpoint.plck";
    model.load(r.checkpoint);
    r.tables = evaluate_model(model, data, report.plan.test[f], cfg);
    log.info("eval fold " + std::to_string(f) + ": " + std::to_string(report.plan.test[f].size()) +
             " held-out samples");
    report.folds.push_back(std::move(r));
  }
  summarize(report, cfg);
  write_metrics(report, cfg, data.classes, out);
  return report;
}

Arm parse_arm(const std::string& spec) {
  Arm arm;
  const auto colon = spec.find(':');
  arm.name = trim(spec.substr(0, colon));
  if (arm.name.empty()) throw ConfigError("arm '" + spec + "': missing name");
  if (colon == std::string::npos) return arm;
  std::stringstream ss(spec.substr(colon + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("arm '" + spec + "': expected key=value");
    const std::string k = trim(item.substr(0, eq)), v = trim(item.substr(eq + 1));
    if (k == "loss") {
      arm.family = parse_loss_family(v);
    } else if (k == "unannotated") {
      arm.unannotated_fraction = to_double("unannotated", v);
    } else {
      throw ConfigError("arm '" + spec + "': arms may differ only in loss and unannotated, not '" + k + "'");
    }
  }
  return arm;
}

CompareReport cmd_compare(const RunConfig& cfg, const std::vector<Arm>& arms, const fs::path& out,
                          const Logger& log) {
  if (arms.size() < 2) throw ConfigError("compare: need at least two arms");
  CompareReport cr;
  cr.arms = arms;
  for (const auto& arm : arms) {
    RunConfig c = cfg;
    if (arm.family) c.loss.family = *arm.family;
    if (arm.unannotated_fraction) c.train.unannotated_fraction = *arm.unannotated_fraction;
    log.info("compare: arm " + arm.name);
    cr.reports.push_back(cmd_train(c, out / arm.name, log));
  }
  const std::size_t K = cfg.backbone.classes;
  const auto names = class_names(K);
  for (std::size_t t = 0; t < cfg.eval_T.size(); ++t) {
    std::ostringstream csv;
    csv << "class,criterion";
    for (const auto& a : arms) csv << ',' << a.name;
    csv << '\n';
    for (Criterion c : {Criterion::kIoU, Criterion::kIoR}) {
      std::vector<BarSeries> series;
      for (std::size_t a = 0; a < arms.size(); ++a) {
        BarSeries s{arms[a].name, {}};
        const auto& sum = cr.reports[a].summaries[t];
        for (const auto& st : c == Criterion::kIoU ? sum.iou : sum.ior) s.values.push_back(st.mean);
        series.push_back(std::move(s));
      }
      for (std::size_t k = 0; k <= K; ++k) {
        csv << (k < K ? names[k] : std::string("mean")) << ',' << to_string(c);
        for (std::size_t a = 0; a < arms.size(); ++a) {
          const auto& sum = cr.reports[a].summaries[t];
          const auto v = k < K ? series[a].values[k]
                               : (c == Criterion::kIoU ? sum.mean_iou : sum.mean_ior);
          csv << ',';
          if (v) csv << fmt_double(*v);
        }
        csv << '\n';
      }
      std::ostringstream svg;
      write_bar_svg(svg, to_string(c) + " accuracy by arm, T=" + fmt_double(cfg.eval_T[t]), names, series);
      write_text(out / ("compare_" + to_string(c) + "_T" + fmt_double(cfg.eval_T[t]) + ".svg"), svg.str());
    }
    write_text(out / ("compare_T" + fmt_double(cfg.eval_T[t]) + ".csv"), csv.str());
  }
  return cr;
}

void cmd_stability(const fs::path& out) {
  fs::create_directories(out);
  const auto rows = stability_report({5, 10, 20}, {0.1, 0.3, 0.5}, {Precision::kF32, Precision::kF64});
  std::ostringstream os;
  write_stability_csv(os, rows);
  write_text(out / "stability.csv", os.str());
}

void cmd_report(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "config.json")) {
    throw IoError("report: " + run_dir.string() + " is not a run directory (no config.json)");
  }
  std::ostringstream md;
  md << "# Run report\n\n";
  std::vector<fs::path> metrics;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("metrics_T", 0) == 0) metrics.push_back(e.path());
  }
  std::sort(metrics.begin(), metrics.end());
  auto table = [&md](const fs::path& csv) {
    std::ifstream in(csv);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
      std::string cell;
      std::stringstream ss(line);
      md << '|';
      std::size_t cols = 0;
      while (std::getline(ss, cell, ',')) {
        md << ' ' << cell << " |";
        ++cols;
      }
      md << '\n';
      if (header) {
        md << '|';
        for (std::size_t i = 0; i < cols; ++i) md << " --- |";
        md << '\n';
        header = false;
      }
    }
    md << '\n';
  };
  for (const auto& m : metrics) {
    md << "## " << m.stem().string() << "\n\n";
    table(m);
  }
  std::vector<fs::path> folds;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    if (e.is_directory() && e.path().filename().string().rfind("fold_", 0) == 0) folds.push_back(e.path());
  }
  std::sort(folds.begin(), folds.end());
  for (const auto& f : folds) {
    if (!fs::exists(f / "thresholds.csv")) continue;
    md << "## " << f.filename().string() << " thresholds\n\n";
    table(f / "thresholds.csv");
  }
  write_text(run_dir / "report.md", md.str());
}

}  // namespace plc
