#include "plc/crf_pac.hpp"

#include <cmath>
#include <random>
#include <string>

#include "plc/error.hpp"

namespace plc {

void CrfConfig::validate(std::size_t grid) const {
  if (window % 2 == 0 || window == 0) {
    throw ConfigError("crf: window side must be odd, got " + std::to_string(window));
  }
  if (window > 2 * grid - 1) {
    throw ConfigError("crf: window " + std::to_string(window) +
                      " exceeds 2P-1 for grid " + std::to_string(grid));
  }
  if (iterations == 0) throw ConfigError("crf: iteration count must be >= 1");
  if (feature_dim == 0) throw ConfigError("crf: feature dimension must be >= 1");
  if (!(bandwidth > 0.0)) throw ConfigError("crf: bandwidth must be positive");
  if (!(clamp > 0.0 && clamp < 0.5)) throw ConfigError("crf: clamp must be in (0, 0.5)");
}

std::vector<double> patch_coordinates(std::size_t grid, std::size_t patch_side) {
  std::vector<double> xi(grid * grid * 2);
  const double half = 0.5 * static_cast<double>(patch_side);
  for (std::size_t r = 0; r < grid; ++r) {
    for (std::size_t c = 0; c < grid; ++c) {
      xi[(r * grid + c) * 2 + 0] = static_cast<double>(r * patch_side) + half;
      xi[(r * grid + c) * 2 + 1] = static_cast<double>(c * patch_side) + half;
    }
  }
  return xi;
}

PacCrf::PacCrf(CrfConfig config, const BackboneConfig& backbone, std::uint64_t seed)
    : config_(config), backbone_(backbone) {
  backbone_.validate();
  config_.validate(backbone_.grid);
  std::mt19937_64 rng(seed);
  const std::size_t F = config_.feature_dim;
  auto make_layer = [&](std::size_t in, std::size_t out) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * 9)));
    std::vector<double> w(out * in * 9);
    for (auto& v : w) v = dist(rng);
    Layer l;
    l.weight = Tensor(Shape{out, in, 3, 3}, std::move(w));
    l.bias = Tensor(Shape{out}, 0.0);
    l.scale = Tensor(Shape{out}, 1.0);
    l.shift = Tensor(Shape{out}, 0.0);
    for (Tensor* t : {&l.weight, &l.bias, &l.scale, &l.shift}) t->set_requires_grad(true);
    l.stats = ops::NormStats::fresh(out);
    return l;
  };
  first_ = make_layer(1, F);
  second_ = make_layer(F, F);
  const std::size_t K = backbone_.classes, S = config_.window;
  w_ = Tensor(Shape{K, K, S, S}, 0.0);
  w_.set_requires_grad(true);
}

PatchFeatures PacCrf::compute_features(const Tensor& images, Mode mode) {
  const std::size_t s = backbone_.input_side;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != s || images.dim(3) != s) {
    throw ShapeError("crf features: expected images [N,1," + std::to_string(s) + "," +
                     std::to_string(s) + "], got " + shape_str(images.shape()));
  }
  const bool training = mode == Mode::kTrain;
  Tensor x = ops::conv2d(images, first_.weight, first_.bias, 1);
  x = ops::relu(x);
  x = ops::affine_norm(x, first_.scale, first_.shift, first_.stats, training);
  for (std::size_t i = 0; i < backbone_.stages(); ++i) {
    x = ops::blur_downsample(x, backbone_.blur_taps);
  }
  x = ops::conv2d(x, second_.weight, second_.bias, 1);
  x = ops::relu(x);
  x = ops::affine_norm(x, second_.scale, second_.shift, second_.stats, training);
  return PatchFeatures{x, patch_coordinates(backbone_.grid, backbone_.patch_side())};
}

Tensor pairwise_message(const Tensor& z, const PatchFeatures& features,
                        const Tensor& compatibility, double bandwidth) {
  return ops::pac_message(z, features.f, compatibility, bandwidth);
}

Tensor PacCrf::refine(const Tensor& p, const PatchFeatures& features) const {
  const Tensor unary = ops::logit(p, config_.clamp);
  Tensor z = p;
  for (std::size_t t = 0; t < config_.iterations; ++t) {
    try {
      const Tensor m = pairwise_message(z, features, w_, config_.bandwidth);
      z = ops::sigmoid(ops::sub(unary, m));
    } catch (const NumericError& e) {
      throw NumericError("crf refine: iteration " + std::to_string(t) + ": " + e.what());
    }
  }
  return z;
}

std::vector<NamedTensor> PacCrf::parameters() const {
  std::vector<NamedTensor> out{{"crf.W", w_}};
  const Layer* layers[] = {&first_, &second_};
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string p = "crf.feat." + std::to_string(i) + ".";
    out.push_back({p + "weight", layers[i]->weight});
    out.push_back({p + "bias", layers[i]->bias});
    out.push_back({p + "scale", layers[i]->scale});
    out.push_back({p + "shift", layers[i]->shift});
  }
  return out;
}

std::vector<NamedTensor> PacCrf::state() const {
  auto out = parameters();
  const Layer* layers[] = {&first_, &second_};
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string p = "crf.feat." + std::to_string(i) + ".";
    out.push_back({p + "running_mean", layers[i]->stats.running_mean});
    out.push_back({p + "running_var", layers[i]->stats.running_var});
  }
  return out;
}

void PacCrf::zero_feature_weights() {
  for (Layer* l : {&first_, &second_}) {
    for (auto& v : l->weight.mutable_data()) v = 0.0;
    for (auto& v : l->bias.mutable_data()) v = 0.0;
  }
}

}  // namespace plc
