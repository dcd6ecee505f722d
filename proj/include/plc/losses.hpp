#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "plc/patch.hpp"
#include "plc/tensor.hpp"

namespace plc {

enum class LossFamily { kBaseline, kSigmoid, kRelu };

LossFamily parse_loss_family(const std::string& name);
std::string to_string(LossFamily family);

// Whole-image labels y, box flags a, and per-class box masks b (union of all
// boxes of that class; empty mask when a == 0).
struct Annotation {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> annotated;
  std::vector<PatchMask> boxes;

  static Annotation empty(std::size_t classes, std::size_t grid);
  std::size_t classes() const { return labels.size(); }
  bool any_annotated() const;
  // Throws DataError mentioning `id` when a=1 without y=1, a boxed class has
  // an empty mask, or a mask has the wrong grid.
  void validate(std::size_t classes, std::size_t grid, const std::string& id) const;
};

struct ClassThresholds {
  double tau = 0.5;      // fraction of the box that must fire
  double rho = 0.1;      // fraction of the complement allowed to fire
  double tau_hat = 2.0;  // absolute patches required on positives
  double rho_hat = 2.0;  // absolute patches allowed on negatives
};

struct ThresholdSet {
  std::vector<ClassThresholds> classes;

  static ThresholdSet uniform(std::size_t k, ClassThresholds value = {});
};

struct LossConfig {
  double lambda_ann = 70.0;
  std::vector<double> gamma;  // per class, positive/negative ratio
  LossFamily family = LossFamily::kRelu;
  double sigmoid_steepness = 1.0;
  double log_floor = 1e-12;  // baseline family, training path only

  void validate(std::size_t classes) const;
};

// ---- scalar evaluations on one sample ------------------------------------

enum class ProductMode { kLogDomain, kRawProduct };

struct NllResult {
  double value = 0.0;
  bool infinite = false;  // the probability was (or underflowed to) zero
};

// -log( prod_{b} p * prod_{not b} (1 - p) ) for class k.
NllResult baseline_ann_nll(const PatchScores& p, std::size_t k, const PatchMask& box,
                           ProductMode mode = ProductMode::kLogDomain);

// 1 - prod_j (1 - p_j) for class k.
double baseline_un_prob(const PatchScores& p, std::size_t k);

struct SigmoidClassLoss {
  double ann = 0.0;  // -s(S_b - tau|b|) * s(rho|~b| - S_~b); 0 when a == 0
  double un = 0.0;   // -y s(S - tau_hat) - (1-y) s(rho_hat - S)
};
std::vector<SigmoidClassLoss> sigmoid_losses(const PatchScores& z, const Annotation& ann,
                                             const ThresholdSet& th, double steepness = 1.0);

// |b|^-1 ReLU(tau|b| - S_b) + |~b|^-1 ReLU(S_~b - rho|~b|). Throws when the
// box or its complement is empty.
double relu_ann_loss(const PatchScores& z, std::size_t k, const PatchMask& box,
                     double tau, double rho);

// y ReLU(tau_hat - S) + gamma (1 - y) ReLU(S - rho_hat).
double relu_un_loss(const PatchScores& z, std::size_t k, bool y, double tau_hat,
                    double rho_hat, double gamma);

// Per-example loss of the configured family, summed over classes with a^k
// gating the annotated and unannotated terms.
double full_loss(const PatchScores& z, const Annotation& ann, const ThresholdSet& th,
                 const LossConfig& cfg);

// ---- differentiable batch loss --------------------------------------------

struct BatchTargets {
  std::size_t batch = 0;
  std::size_t classes = 0;
  std::size_t grid = 0;
  Tensor box;         // [N,K,P,P], box mask where a == 1
  Tensor complement;  // [N,K,P,P], complement mask where a == 1
  Tensor ones;        // [N,K,P,P]
  std::vector<std::uint8_t> labels;     // N*K
  std::vector<std::uint8_t> annotated;  // N*K
  std::vector<double> box_size;         // N*K, |b| (0 when a == 0)
  std::vector<double> complement_size;  // N*K
};

BatchTargets make_targets(const std::vector<const Annotation*>& batch, std::size_t grid);

struct BatchLoss {
  Tensor total;                   // scalar: mean per-example loss
  std::vector<double> per_class;  // mean per-example contribution of each class
};

// z: [N,K,P,P]. Builds the loss through tape ops, so backward() reaches z.
BatchLoss batch_loss(const Tensor& z, const BatchTargets& targets, const ThresholdSet& th,
                     const LossConfig& cfg);

// ---- numerical stability demonstration -----------------------------------

enum class Precision { kF32, kF64 };
std::string to_string(Precision precision);

struct StabilityRow {
  std::size_t grid = 0;
  double p_value = 0.0;
  Precision precision = Precision::kF64;
  double eq1_raw = 0.0;        // -log of the raw product (inf on underflow)
  double eq1_logdomain = 0.0;  // same quantity via a sum of logs
  double eq9_loss = 0.0;       // ReLU annotated loss on the same grid
  bool underflow = false;      // raw product evaluated to zero
};

// Uniform scores p on a P x P grid with a full-grid box for the product
// form; the ReLU loss uses the top half of the grid as the box (whole grid,
// inside term only, when P == 1) with tau = 0.5 and rho = 0.1.
std::vector<StabilityRow> stability_report(const std::vector<std::size_t>& grids,
                                           const std::vector<double>& p_values,
                                           const std::vector<Precision>& precisions);

void write_stability_csv(std::ostream& os, const std::vector<StabilityRow>& rows);

}  // namespace plc
