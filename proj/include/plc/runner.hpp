#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "plc/adam.hpp"
#include "plc/backbone.hpp"
#include "plc/crf_pac.hpp"
#include "plc/data_synth.hpp"
#include "plc/eval_metrics.hpp"
#include "plc/losses.hpp"
#include "plc/threshold_fit.hpp"

namespace plc {

struct TrainSettings {
  std::size_t batch_size = 48;
  std::size_t phase1_epochs = 12;
  std::size_t phase2_epochs = 4;
  double tolerance = 1e-3;   // relative loss improvement counted as progress
  std::size_t patience = 3;  // epochs without progress before stopping
  bool alternate = true;     // refit thresholds after every epoch
  std::size_t folds = 5;
  std::size_t fold_limit = 0;  // train only the first N folds (0 = all)
  std::uint64_t seed = 1;
  double unannotated_fraction = 0.2;
  std::size_t eval_batch = 64;
};

struct RunConfig {
  std::string dataset;
  BackboneConfig backbone;
  CrfConfig crf;
  LossConfig loss;                 // gamma filled per fold unless fixed
  std::vector<double> fixed_gamma; // empty: per-class ratio from the training split
  ThresholdFitConfig thresholds;
  ClassThresholds initial_thresholds;
  AdamConfig adam;
  TrainSettings train;
  SynthConfig synth;
  std::vector<double> eval_T{0.1};

  // Applies one dotted key; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  // Resolved configuration as pretty JSON text.
  std::string to_json() const;
};

// key = value lines, '#' comments. Errors name the origin and line.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

class Logger {
 public:
  explicit Logger(std::ostream* sink = nullptr) : sink_(sink) {}
  void info(const std::string& msg) const;

 private:
  std::ostream* sink_;
};

// Everything a trained fold needs to score a batch of images.
struct Model {
  Backbone backbone;
  PacCrf crf;
  ThresholdSet thresholds;

  Model(const RunConfig& cfg);
  // Inference: [N,1,S,S] -> refined z [N,K,P,P].
  Tensor predict(const Tensor& images);
  // Backbone state, CRF state and "thresholds.<k>.<name>" scalars.
  std::vector<NamedTensor> state() const;
  void load(const std::filesystem::path& checkpoint);
  void save(const std::filesystem::path& checkpoint) const;
};

using Predictor = std::function<Tensor(const Tensor& images, const std::vector<std::size_t>& ids)>;

// Per-class overlap of every annotated class of every test sample.
std::vector<SampleOverlap> score_samples(const Dataset& data, const std::vector<std::size_t>& ids,
                                         const Predictor& predict, std::size_t batch);

// z painted from the ground-truth boxes (1 inside, 0 outside).
Predictor oracle_predictor(const Dataset& data);

struct FoldResult {
  std::size_t fold = 0;
  std::filesystem::path checkpoint;
  std::vector<AccuracyTable> tables;  // one per eval T
  std::vector<double> final_loss;     // last epoch loss per phase
  bool converged_phase1 = false;
};

struct TrainReport {
  std::vector<FoldResult> folds;
  std::vector<FoldSummary> summaries;  // one per eval T
  FoldPlan plan;
};

// Indices of training samples for a fold: its annotated train ids plus the
// seeded unannotated pool prefix.
std::vector<std::size_t> training_ids(const Dataset& data, const FoldPlan& plan, std::size_t fold,
                                      double unannotated_fraction, std::uint64_t seed);

// Positive/negative ratio per class over `ids`, clamped to [1e-3, 1].
std::vector<double> class_balance(const Dataset& data, const std::vector<std::size_t>& ids);

FoldPlan plan_folds(const Dataset& data, const RunConfig& cfg);

// Trains one fold (phase 1 backbone, phase 2 CRF) and writes its checkpoint
// and log under `dir`. Throws NumericError on a non-finite loss after
// keeping the last finite checkpoint.
FoldResult train_fold(const RunConfig& cfg, const Dataset& data, const FoldPlan& plan,
                      std::size_t fold, const std::filesystem::path& dir, const Logger& log);

TrainReport cmd_train(const RunConfig& cfg, const std::filesystem::path& out, const Logger& log);

// Reloads fold checkpoints from `run_dir` and scores the held-out folds.
TrainReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& run_dir,
                     const std::filesystem::path& out, const Logger& log);

struct Arm {
  std::string name;
  std::optional<LossFamily> family;
  std::optional<double> unannotated_fraction;
};
// "name:loss=relu,unannotated=0.2"
Arm parse_arm(const std::string& spec);

struct CompareReport {
  std::vector<Arm> arms;
  std::vector<TrainReport> reports;
};

CompareReport cmd_compare(const RunConfig& cfg, const std::vector<Arm>& arms,
                          const std::filesystem::path& out, const Logger& log);

void cmd_stability(const std::filesystem::path& out);

// Collects metrics and thresholds of a finished run into report.md.
void cmd_report(const std::filesystem::path& run_dir);

// Writes metrics CSV/SVG files for a report under `out`.
void write_metrics(const TrainReport& report, const RunConfig& cfg, std::size_t classes,
                   const std::filesystem::path& out);

std::vector<std::string> class_names(std::size_t classes);

}  // namespace plc
