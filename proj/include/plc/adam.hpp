#pragma once

#include <cstdint>
#include <vector>

#include "plc/tensor.hpp"

namespace plc {

struct AdamConfig {
  double learning_rate = 0.001;
  double weight_decay = 0.01;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr_decay = 0.95;  // multiplied into the learning rate per epoch
};

// ADAM with decoupled weight decay over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig config);

  // One update from the current gradients. Throws if a parameter has no
  // gradient buffer.
  void step();
  void zero_grad();
  // Epoch boundary: decays the learning rate.
  void end_epoch();

  double learning_rate() const { return lr_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  std::uint64_t t_ = 0;
};

}  // namespace plc
