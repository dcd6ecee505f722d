#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "plc/ops.hpp"
#include "plc/patch.hpp"
#include "plc/tensor.hpp"

namespace plc {

enum class Mode { kTrain, kInfer };

struct BackboneConfig {
  std::size_t input_side = 64;
  std::size_t grid = 8;  // P
  std::size_t classes = 6;  // K
  std::vector<std::size_t> widths{16, 32, 64};  // one stage per downsampling
  std::size_t blur_taps = 3;

  std::size_t stages() const { return widths.size(); }
  std::size_t patch_side() const { return input_side / grid; }
  // Throws ConfigError: input side must equal grid * 2^stages, K >= 1, taps
  // in {1, 2, 3, 5}.
  void validate() const;
};

// Plain conv stack: per stage conv3x3 -> norm -> ReLU -> blur_downsample,
// then a conv3x3 -> norm -> ReLU head and a 1x1 conv to K logits, sigmoid.
class Backbone {
 public:
  Backbone(BackboneConfig config, std::uint64_t seed);

  // images: [N,1,S,S] -> patch probabilities [N,K,P,P].
  Tensor forward(const Tensor& images, Mode mode);

  const BackboneConfig& config() const { return config_; }

  // Learnable tensors, named "backbone.<stage>.<param>".
  std::vector<NamedTensor> parameters() const;
  // parameters() plus normalization running statistics.
  std::vector<NamedTensor> state() const;

  // A view with a different blur tap count that shares this model's weights.
  Backbone with_blur_taps(std::size_t taps) const;

  // Zeroes the final 1x1 layer (weights and bias): every output becomes 0.5.
  void zero_output_layer();

 private:
  struct Block {
    Tensor weight;
    Tensor scale;
    Tensor shift;
    ops::NormStats stats;
  };
  Tensor check_input(const Tensor& images) const;

  BackboneConfig config_;
  std::vector<Block> stages_;
  Block head_;
  Tensor out_weight_;
  Tensor out_bias_;
};

// Single-image convenience: image [1,1,S,S] or [S,S] -> P x P x K scores.
PatchScores forward_patch_probs(Backbone& backbone, const Tensor& image);

// Mean absolute change of the patch probabilities under the four cyclic
// one-pixel diagonal shifts of `image` ([1,1,S,S]), evaluated in inference
// mode with `taps` blur taps on the same weights.
double shift_sensitivity(const Backbone& backbone, const Tensor& image,
                         std::size_t taps);

// Cyclic shift of an [N,C,H,W] tensor by (dy, dx) pixels.
Tensor roll_image(const Tensor& images, long dy, long dx);

}  // namespace plc
