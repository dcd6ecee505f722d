#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "plc/backbone.hpp"
#include "plc/ops.hpp"
#include "plc/tensor.hpp"

namespace plc {

struct CrfConfig {
  std::size_t window = 5;      // side of the square neighbourhood, odd
  std::size_t iterations = 5;  // unrolled mean-field steps
  std::size_t feature_dim = 8;
  double bandwidth = 1.0;      // Gaussian affinity bandwidth
  double clamp = 1e-7;         // unary probabilities clamped before the logit

  void validate(std::size_t grid) const;
};

struct PatchFeatures {
  Tensor f;                 // [N,F,P,P] learned features
  std::vector<double> xi;   // P x P x 2 patch-centre pixel coordinates (row, col)
};

// Patch-centre pixel coordinates for a P x P grid of `patch_side` pixels.
std::vector<double> patch_coordinates(std::size_t grid, std::size_t patch_side);

// Pixel-adaptive CRF over the patch grid. Unaries come from the backbone;
// pairwise terms couple patches inside the window through learned features
// and an offset-dependent class compatibility W.
//
// Refinement unrolls z(t+1) = sigmoid(logit(clamp(p)) - m(z(t))) from
// z(0) = p, where m is pac_message. W starts at zero, so a fresh CRF returns
// its input.
class PacCrf {
 public:
  PacCrf(CrfConfig config, const BackboneConfig& backbone, std::uint64_t seed);

  // Feature branch: conv3x3 -> ReLU -> norm at input resolution, blur
  // downsampling to the grid, conv3x3 -> ReLU -> norm.
  PatchFeatures compute_features(const Tensor& images, Mode mode);

  // p: [N,K,P,P] -> refined z of the same shape.
  Tensor refine(const Tensor& p, const PatchFeatures& features) const;

  Tensor& compatibility() { return w_; }
  const Tensor& compatibility() const { return w_; }
  const CrfConfig& config() const { return config_; }

  // "crf.W" and "crf.feat.<layer>.<param>".
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> state() const;

  // Zeroes the feature branch weights and biases (features become 0).
  void zero_feature_weights();

 private:
  struct Layer {
    Tensor weight;
    Tensor bias;
    Tensor scale;
    Tensor shift;
    ops::NormStats stats;
  };

  CrfConfig config_;
  BackboneConfig backbone_;
  Layer first_;
  Layer second_;
  Tensor w_;
};

// Pairwise message m (see ops::pac_message) with the features' affinity.
Tensor pairwise_message(const Tensor& z, const PatchFeatures& features,
                        const Tensor& compatibility, double bandwidth);

}  // namespace plc
