#include "plc/patch.hpp"

#include <algorithm>
#include <cmath>

#include "plc/error.hpp"

namespace plc {

std::size_t PatchMask::count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), 1));
}

PatchMask PatchMask::complement() const {
  PatchMask out(grid_);
  for (std::size_t i = 0; i < cells_.size(); ++i) out.cells_[i] = cells_[i] ? 0 : 1;
  return out;
}

PatchMask& PatchMask::operator|=(const PatchMask& other) {
  if (other.grid_ != grid_) throw ShapeError("mask union: grid size mismatch");
  for (std::size_t i = 0; i < cells_.size(); ++i) cells_[i] = (cells_[i] || other.cells_[i]) ? 1 : 0;
  return *this;
}

PatchMask PatchMask::operator&(const PatchMask& other) const {
  if (other.grid_ != grid_) throw ShapeError("mask intersection: grid size mismatch");
  PatchMask out(grid_);
  for (std::size_t i = 0; i < cells_.size(); ++i) out.cells_[i] = (cells_[i] && other.cells_[i]) ? 1 : 0;
  return out;
}

PatchMask PatchMask::operator|(const PatchMask& other) const {
  PatchMask out = *this;
  out |= other;
  return out;
}

PatchScores PatchScores::from_tensor(const Tensor& t, std::size_t n) {
  if (t.rank() != 4 || t.dim(2) != t.dim(3) || n >= t.dim(0)) {
    throw ShapeError("patch scores: expected [N,K,P,P] with sample " +
                     std::to_string(n) + ", got " + shape_str(t.shape()));
  }
  const std::size_t K = t.dim(1), P = t.dim(2);
  PatchScores s(P, K);
  const auto v = t.data();
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t c = 0; c < P * P; ++c) s.at(c, k) = v[(n * K + k) * P * P + c];
  return s;
}

Tensor PatchScores::to_tensor(const std::vector<PatchScores>& batch) {
  if (batch.empty()) throw ShapeError("patch scores: empty batch");
  const std::size_t K = batch[0].classes(), P = batch[0].grid();
  std::vector<double> values(batch.size() * K * P * P);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (batch[n].classes() != K || batch[n].grid() != P) {
      throw ShapeError("patch scores: mixed grid sizes in batch");
    }
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < P * P; ++c) values[(n * K + k) * P * P + c] = batch[n].at(c, k);
  }
  return Tensor(Shape{batch.size(), K, P, P}, std::move(values));
}

double PatchScores::class_sum(std::size_t k) const {
  double s = 0.0;
  for (std::size_t c = 0; c < cells(); ++c) s += at(c, k);
  return s;
}

double PatchScores::class_sum(std::size_t k, const PatchMask& mask) const {
  if (mask.grid() != grid_) throw ShapeError("class_sum: mask grid mismatch");
  double s = 0.0;
  for (std::size_t c = 0; c < cells(); ++c)
    if (mask.get(c)) s += at(c, k);
  return s;
}

void PatchScores::validate() const {
  for (double v : values_) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("patch scores: entry outside [0,1]: " + std::to_string(v));
    }
  }
}

}  // namespace plc
