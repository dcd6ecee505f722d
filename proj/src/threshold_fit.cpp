#include "plc/threshold_fit.hpp"

#include <algorithm>
#include <functional>
#include <string>

#include "plc/error.hpp"

namespace plc {

double ThresholdFitConfig::resolved_rho_hat_max(std::size_t grid) const {
  const double cells = static_cast<double>(grid * grid);
  return rho_hat_max < 0.0 ? 0.25 * cells : rho_hat_max;
}

void ThresholdFitConfig::validate(std::size_t grid) const {
  const double cells = static_cast<double>(grid * grid);
  if (!(tau_hat_min > 0.0) || tau_hat_min > cells) {
    throw ConfigError("thresholds: tau_hat_min must lie in (0, P^2]");
  }
  const double rmax = resolved_rho_hat_max(grid);
  if (rmax < 0.0 || rmax >= cells) throw ConfigError("thresholds: rho_hat_max must lie in [0, P^2)");
  if (!(tau_min > 0.0) || tau_min > 1.0) throw ConfigError("thresholds: tau_min must lie in (0, 1]");
  if (rho_max < 0.0 || rho_max >= 1.0) throw ConfigError("thresholds: rho_max must lie in [0, 1)");
  if (slack_fraction < 0.0) throw ConfigError("thresholds: slack_fraction must be >= 0");
  if (tolerance < 0.0) throw ConfigError("thresholds: tolerance must be >= 0");
  if (!(diagnostic_step > 0.0)) throw ConfigError("thresholds: diagnostic_step must be positive");
}

void append_sums(std::vector<ClassSums>& acc, const Tensor& z,
                 const std::vector<const Annotation*>& ann) {
  if (z.rank() != 4 || z.dim(0) != ann.size()) {
    throw ShapeError("collect_sums: scores " + shape_str(z.shape()) + " vs " +
                     std::to_string(ann.size()) + " annotations");
  }
  const std::size_t K = z.dim(1);
  if (acc.empty()) acc.resize(K);
  if (acc.size() != K) throw ShapeError("collect_sums: class count mismatch");
  for (std::size_t n = 0; n < ann.size(); ++n) {
    const PatchScores s = PatchScores::from_tensor(z, n);
    const Annotation& a = *ann[n];
    for (std::size_t k = 0; k < K; ++k) {
      if (a.annotated[k]) {
        const auto& box = a.boxes[k];
        const auto comp = box.complement();
        acc[k].inside.push_back(s.class_sum(k, box) / static_cast<double>(box.count()));
        if (!comp.empty()) {
          acc[k].outside.push_back(s.class_sum(k, comp) / static_cast<double>(comp.count()));
        }
      } else if (a.labels[k]) {
        acc[k].positive.push_back(s.class_sum(k));
      } else {
        acc[k].negative.push_back(s.class_sum(k));
      }
    }
  }
}

std::vector<ClassSums> collect_sums(const Tensor& z, const std::vector<const Annotation*>& ann) {
  std::vector<ClassSums> out;
  append_sums(out, z, ann);
  return out;
}

double largest_within_slack(std::vector<double> v, double eps) {
  if (v.empty()) throw DataError("threshold fit: empty sample set");
  std::sort(v.begin(), v.end());
  // On [v_m, v_{m+1}] the hinge total is m t - prefix_m.
  double prefix = 0.0;
  for (std::size_t m = 1; m <= v.size(); ++m) {
    prefix += v[m - 1];
    const double md = static_cast<double>(m);
    if (m == v.size() || md * v[m] - prefix > eps) return (eps + prefix) / md;
  }
  return v.back();
}

double smallest_within_slack(const std::vector<double>& v, double eps) {
  std::vector<double> neg(v.size());
  std::transform(v.begin(), v.end(), neg.begin(), std::negate<>());
  return -largest_within_slack(std::move(neg), eps);
}

FitResult fit_thresholds(const std::vector<ClassSums>& sums, const ThresholdSet& previous,
                         const ThresholdFitConfig& cfg, std::size_t grid) {
  cfg.validate(grid);
  if (previous.classes.size() != sums.size()) {
    throw ShapeError("fit_thresholds: " + std::to_string(sums.size()) + " classes of sums vs " +
                     std::to_string(previous.classes.size()) + " thresholds");
  }
  const double cells = static_cast<double>(grid * grid);
  const double rho_hat_max = cfg.resolved_rho_hat_max(grid);
  const std::size_t K = sums.size();
  FitResult out;
  out.thresholds = previous;
  out.kept_tau_hat.assign(K, false);
  out.kept_rho_hat.assign(K, false);
  out.kept_tau.assign(K, false);
  out.kept_rho.assign(K, false);
  auto eps = [&](const std::vector<double>& v) {
    return cfg.slack_fraction * static_cast<double>(v.size());
  };
  for (std::size_t k = 0; k < K; ++k) {
    const ClassSums& s = sums[k];
    ClassThresholds& t = out.thresholds.classes[k];
    if (s.positive.empty()) {
      out.kept_tau_hat[k] = true;
    } else {
      t.tau_hat = std::clamp(largest_within_slack(s.positive, eps(s.positive)), cfg.tau_hat_min, cells);
    }
    if (s.negative.empty()) {
      out.kept_rho_hat[k] = true;
    } else {
      t.rho_hat = std::clamp(smallest_within_slack(s.negative, eps(s.negative)), 0.0, rho_hat_max);
    }
    if (s.inside.empty()) {
      out.kept_tau[k] = true;
    } else {
      t.tau = std::clamp(largest_within_slack(s.inside, eps(s.inside)), cfg.tau_min, 1.0);
    }
    if (s.outside.empty()) {
      out.kept_rho[k] = true;
    } else {
      t.rho = std::clamp(smallest_within_slack(s.outside, eps(s.outside)), 0.0, cfg.rho_max);
    }
  }
  return out;
}

namespace {

// Fraction of values strictly below t (hinge max(0, t - v) is active).
double active_below(const std::vector<double>& v, double t) {
  if (v.empty()) return 0.0;
  const auto n = std::count_if(v.begin(), v.end(), [t](double x) { return x < t; });
  return static_cast<double>(n) / static_cast<double>(v.size());
}

double active_above(const std::vector<double>& v, double t) {
  if (v.empty()) return 0.0;
  const auto n = std::count_if(v.begin(), v.end(), [t](double x) { return x > t; });
  return static_cast<double>(n) / static_cast<double>(v.size());
}

}  // namespace

ThresholdSet descend_thresholds(const std::vector<ClassSums>& sums, const ThresholdSet& start,
                                const std::vector<double>& gamma, const ThresholdFitConfig& cfg,
                                std::size_t grid) {
  if (start.classes.size() != sums.size() || gamma.size() != sums.size()) {
    throw ShapeError("descend_thresholds: class count mismatch");
  }
  const double cells = static_cast<double>(grid * grid);
  ThresholdSet t = start;
  for (std::size_t step = 0; step < cfg.diagnostic_steps; ++step) {
    for (std::size_t k = 0; k < sums.size(); ++k) {
      const ClassSums& s = sums[k];
      ClassThresholds& c = t.classes[k];
      const double lr = cfg.diagnostic_step;
      c.tau_hat = std::clamp(c.tau_hat - lr * cells * active_below(s.positive, c.tau_hat), 0.0, cells);
      c.rho_hat = std::clamp(c.rho_hat + lr * cells * gamma[k] * active_above(s.negative, c.rho_hat),
                             0.0, cells);
      c.tau = std::clamp(c.tau - lr * active_below(s.inside, c.tau), 0.0, 1.0);
      c.rho = std::clamp(c.rho + lr * active_above(s.outside, c.rho), 0.0, 1.0);
    }
  }
  return t;
}

}  // namespace plc
