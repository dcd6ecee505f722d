#include "plc/backbone.hpp"

#include <cmath>
#include <random>
#include <string>

#include "plc/error.hpp"
#include "plc/kernels.hpp"

namespace plc {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor filled_param(std::size_t n, double value) {
  Tensor t(Shape{n}, value);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

void BackboneConfig::validate() const {
  if (classes == 0) throw ConfigError("backbone: class count must be >= 1");
  if (grid == 0) throw ConfigError("backbone: grid side must be >= 1");
  if (widths.empty()) throw ConfigError("backbone: need at least one stage");
  for (auto w : widths) {
    if (w == 0) throw ConfigError("backbone: stage width must be >= 1");
  }
  if (blur_taps != 1 && blur_taps != 2 && blur_taps != 3 && blur_taps != 5) {
    throw ConfigError("backbone: blur taps must be one of 1, 2, 3, 5; got " +
                      std::to_string(blur_taps));
  }
  if (input_side != grid << stages()) {
    throw ConfigError("backbone: input side " + std::to_string(input_side) +
                      " != grid " + std::to_string(grid) + " * 2^" +
                      std::to_string(stages()));
  }
}

Backbone::Backbone(BackboneConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::size_t in = 1;
  for (auto width : config_.widths) {
    Block b;
    b.weight = he_normal(Shape{width, in, 3, 3}, in * 9, 1.0, rng);
    b.scale = filled_param(width, 1.0);
    b.shift = filled_param(width, 0.0);
    b.stats = ops::NormStats::fresh(width);
    stages_.push_back(std::move(b));
    in = width;
  }
  head_.weight = he_normal(Shape{in, in, 3, 3}, in * 9, 1.0, rng);
  head_.scale = filled_param(in, 1.0);
  head_.shift = filled_param(in, 0.0);
  head_.stats = ops::NormStats::fresh(in);
  out_weight_ = he_normal(Shape{config_.classes, in, 1, 1}, in, std::sqrt(0.5), rng);
  out_bias_ = filled_param(config_.classes, 0.0);
}

Tensor Backbone::check_input(const Tensor& images) const {
  const std::size_t s = config_.input_side;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != s ||
      images.dim(3) != s) {
    throw ShapeError("backbone: expected images [N,1," + std::to_string(s) +
                     "," + std::to_string(s) + "], got " +
                     shape_str(images.shape()));
  }
  return images;
}

Tensor Backbone::forward(const Tensor& images, Mode mode) {
  Tensor x = check_input(images);
  const bool training = mode == Mode::kTrain;
  for (auto& b : stages_) {
    x = ops::conv2d(x, b.weight, Tensor(), 1);
    x = ops::affine_norm(x, b.scale, b.shift, b.stats, training);
    x = ops::relu(x);
    x = ops::blur_downsample(x, config_.blur_taps);
  }
  x = ops::conv2d(x, head_.weight, Tensor(), 1);
  x = ops::affine_norm(x, head_.scale, head_.shift, head_.stats, training);
  x = ops::relu(x);
  x = ops::conv2d(x, out_weight_, out_bias_, 0);
  return ops::sigmoid(x);
}

std::vector<NamedTensor> Backbone::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = "backbone.stage" + std::to_string(i) + ".";
    out.push_back({p + "weight", stages_[i].weight});
    out.push_back({p + "scale", stages_[i].scale});
    out.push_back({p + "shift", stages_[i].shift});
  }
  out.push_back({"backbone.head.weight", head_.weight});
  out.push_back({"backbone.head.scale", head_.scale});
  out.push_back({"backbone.head.shift", head_.shift});
  out.push_back({"backbone.out.weight", out_weight_});
  out.push_back({"backbone.out.bias", out_bias_});
  return out;
}

std::vector<NamedTensor> Backbone::state() const {
  auto out = parameters();
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string p = "backbone.stage" + std::to_string(i) + ".";
    out.push_back({p + "running_mean", stages_[i].stats.running_mean});
    out.push_back({p + "running_var", stages_[i].stats.running_var});
  }
  out.push_back({"backbone.head.running_mean", head_.stats.running_mean});
  out.push_back({"backbone.head.running_var", head_.stats.running_var});
  return out;
}

Backbone Backbone::with_blur_taps(std::size_t taps) const {
  Backbone copy = *this;
  copy.config_.blur_taps = taps;
  copy.config_.validate();
  return copy;
}

void Backbone::zero_output_layer() {
  for (auto& v : out_weight_.mutable_data()) v = 0.0;
  for (auto& v : out_bias_.mutable_data()) v = 0.0;
}

PatchScores forward_patch_probs(Backbone& backbone, const Tensor& image) {
  const std::size_t s = backbone.config().input_side;
  Tensor x = image;
  if (image.rank() == 2) {
    x = Tensor(Shape{1, 1, image.dim(0), image.dim(1)},
               std::vector<double>(image.data().begin(), image.data().end()));
  }
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(2) != s || x.dim(3) != s) {
    throw ShapeError("forward_patch_probs: expected one " + std::to_string(s) +
                     "x" + std::to_string(s) + " image, got " +
                     shape_str(image.shape()));
  }
  return PatchScores::from_tensor(backbone.forward(x, Mode::kInfer), 0);
}

Tensor roll_image(const Tensor& images, long dy, long dx) {
  if (images.rank() != 4) throw ShapeError("roll_image: need [N,C,H,W]");
  const std::size_t planes = images.dim(0) * images.dim(1);
  const long H = static_cast<long>(images.dim(2)), W = static_cast<long>(images.dim(3));
  std::vector<double> out(images.numel());
  const auto in = images.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (long i = 0; i < H; ++i) {
      const long si = ((i - dy) % H + H) % H;
      for (long j = 0; j < W; ++j) {
        const long sj = ((j - dx) % W + W) % W;
        out[(p * H + i) * W + j] = in[(p * H + si) * W + sj];
      }
    }
  }
  return Tensor(images.shape(), std::move(out));
}

double shift_sensitivity(const Backbone& backbone, const Tensor& image,
                         std::size_t taps) {
  Backbone model = backbone.with_blur_taps(taps);
  const Tensor base = model.forward(image, Mode::kInfer);
  double total = 0.0;
  std::size_t count = 0;
  for (long dy : {-1L, 1L}) {
    for (long dx : {-1L, 1L}) {
      const Tensor shifted = model.forward(roll_image(image, dy, dx), Mode::kInfer);
      for (std::size_t i = 0; i < base.numel(); ++i) {
        total += std::abs(shifted[i] - base[i]);
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace plc
