#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "plc/patch.hpp"

namespace plc {

// Cells with z >= 0.5 for class k.
PatchMask detect_region(const PatchScores& z, std::size_t k);

struct Overlap {
  double iou = 0.0;
  double ior = 0.0;  // intersection over the detected region; 0 if it is empty
};

// Throws DataError when the box is empty, ShapeError on grid mismatch.
Overlap iou_ior(const PatchMask& region, const PatchMask& box);

enum class Criterion { kIoU, kIoR };
std::string to_string(Criterion c);

struct SampleOverlap {
  std::size_t cls = 0;
  Overlap overlap;
};

struct AccuracyCell {
  std::optional<double> accuracy;  // absent when the class has no samples
  std::size_t n = 0;
};

struct AccuracyTable {
  double T = 0.1;
  std::vector<AccuracyCell> iou;  // per class
  std::vector<AccuracyCell> ior;

  const std::vector<AccuracyCell>& column(Criterion c) const { return c == Criterion::kIoU ? iou : ior; }
  // Mean over classes with a present accuracy; nullopt if none.
  std::optional<double> mean(Criterion c) const;
};

// A sample counts as correct when its overlap is >= T. Throws ConfigError
// unless T lies in (0, 1].
AccuracyTable localization_accuracy(const std::vector<SampleOverlap>& results,
                                    std::size_t classes, double T);

void write_accuracy_csv(std::ostream& os, const AccuracyTable& table,
                        const std::vector<std::string>& class_names);

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> test;   // per fold
  std::vector<std::vector<std::size_t>> train;  // per fold: the other folds' ids
};

// Deterministic shuffled partition of `ids` into k folds whose sizes differ
// by at most one.
FoldPlan make_folds(const std::vector<std::size_t>& ids, std::size_t k, std::uint64_t seed);

// Mean and population std of per-fold accuracies, per class and criterion.
struct FoldStat {
  std::optional<double> mean;
  double stddev = 0.0;
  std::size_t folds = 0;  // folds contributing a value
};

struct FoldSummary {
  std::vector<FoldStat> iou, ior;
  std::optional<double> mean_iou, mean_ior;  // mean over folds of the table mean
};

FoldSummary summarize_folds(const std::vector<AccuracyTable>& tables);

// Classes x {IoU, IoR} as "mean +- std".
void write_summary_csv(std::ostream& os, const FoldSummary& summary,
                       const std::vector<std::string>& class_names);

// One bar group per class, bars for each named series of accuracies.
struct BarSeries {
  std::string label;
  std::vector<std::optional<double>> values;
};
void write_bar_svg(std::ostream& os, const std::string& title,
                   const std::vector<std::string>& class_names,
                   const std::vector<BarSeries>& series);

}  // namespace plc
