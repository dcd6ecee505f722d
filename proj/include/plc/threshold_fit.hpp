#pragma once

#include <cstddef>
#include <vector>

#include "plc/losses.hpp"
#include "plc/tensor.hpp"

namespace plc {

struct ThresholdFitConfig {
  double tau_hat_min = 1.0;     // absolute patches
  double rho_hat_max = -1.0;    // absolute; negative means 0.25 * P^2
  double tau_min = 0.5;         // box-relative floor for tau
  double rho_max = 0.1;         // box-relative ceiling for rho
  double slack_fraction = 0.02; // eps = slack_fraction * per-class sample count
  std::size_t rounds = 20;      // alternation budget
  double tolerance = 1e-3;      // relative loss change that ends alternation

  // Diagnostic mode: no anti-degeneracy bounds; thresholds follow the loss
  // subgradient inside their natural ranges.
  bool diagnostic = false;
  std::size_t diagnostic_steps = 200;
  double diagnostic_step = 0.05;

  double resolved_rho_hat_max(std::size_t grid) const;
  void validate(std::size_t grid) const;
};

// Frozen-network statistics of one class over the fit set.
struct ClassSums {
  std::vector<double> positive;  // S over unannotated samples with y = 1
  std::vector<double> negative;  // S over unannotated samples with y = 0
  std::vector<double> inside;    // S_b / |b| over annotated samples
  std::vector<double> outside;   // S_~b / |~b| over annotated samples
};

// Collects per-class sums from frozen scores z: [N,K,P,P].
std::vector<ClassSums> collect_sums(const Tensor& z, const std::vector<const Annotation*>& ann);
void append_sums(std::vector<ClassSums>& acc, const Tensor& z,
                 const std::vector<const Annotation*>& ann);

// Largest t in (-inf, inf) with sum_i max(0, t - v_i) <= eps. v nonempty.
double largest_within_slack(std::vector<double> v, double eps);
// Smallest t with sum_i max(0, v_i - t) <= eps. v nonempty.
double smallest_within_slack(const std::vector<double>& v, double eps);

struct FitResult {
  ThresholdSet thresholds;
  // Per class: a threshold kept its previous value because its sample set
  // was empty.
  std::vector<bool> kept_tau_hat, kept_rho_hat, kept_tau, kept_rho;
};

FitResult fit_thresholds(const std::vector<ClassSums>& sums, const ThresholdSet& previous,
                         const ThresholdFitConfig& cfg, std::size_t grid);

// Diagnostic: projected subgradient descent of the summed hinge losses on the
// thresholds themselves, clipped only to [0,1] (relative) and [0, P^2].
ThresholdSet descend_thresholds(const std::vector<ClassSums>& sums, const ThresholdSet& start,
                                const std::vector<double>& gamma, const ThresholdFitConfig& cfg,
                                std::size_t grid);

}  // namespace plc
