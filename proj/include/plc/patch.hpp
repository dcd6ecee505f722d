#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "plc/tensor.hpp"

namespace plc {

// Boolean P x P mask over the patch grid, row-major.
class PatchMask {
 public:
  PatchMask() = default;
  explicit PatchMask(std::size_t grid, bool fill = false)
      : grid_(grid), cells_(grid * grid, fill ? 1 : 0) {}

  std::size_t grid() const { return grid_; }
  std::size_t cells() const { return cells_.size(); }
  bool get(std::size_t row, std::size_t col) const { return cells_[row * grid_ + col] != 0; }
  bool get(std::size_t cell) const { return cells_[cell] != 0; }
  void set(std::size_t row, std::size_t col, bool on = true) { cells_[row * grid_ + col] = on ? 1 : 0; }
  void set(std::size_t cell, bool on = true) { cells_[cell] = on ? 1 : 0; }

  std::size_t count() const;
  bool empty() const { return count() == 0; }
  PatchMask complement() const;
  PatchMask& operator|=(const PatchMask& other);
  PatchMask operator&(const PatchMask& other) const;
  PatchMask operator|(const PatchMask& other) const;
  bool operator==(const PatchMask&) const = default;

 private:
  std::size_t grid_ = 0;
  std::vector<std::uint8_t> cells_;
};

// P x P x K grid of per-patch class probabilities (p before the CRF, z
// after). Entry (row, col, k) lives at ((row * P) + col) * K + k.
class PatchScores {
 public:
  PatchScores() = default;
  PatchScores(std::size_t grid, std::size_t classes, double fill = 0.0)
      : grid_(grid), classes_(classes), values_(grid * grid * classes, fill) {}

  // Slices sample `n` out of a [N,K,P,P] tensor.
  static PatchScores from_tensor(const Tensor& t, std::size_t n);
  // Packs a batch of same-sized score grids into [N,K,P,P].
  static Tensor to_tensor(const std::vector<PatchScores>& batch);

  std::size_t grid() const { return grid_; }
  std::size_t classes() const { return classes_; }
  std::size_t cells() const { return grid_ * grid_; }

  double at(std::size_t cell, std::size_t k) const { return values_[cell * classes_ + k]; }
  double& at(std::size_t cell, std::size_t k) { return values_[cell * classes_ + k]; }
  double at(std::size_t row, std::size_t col, std::size_t k) const { return at(row * grid_ + col, k); }
  double& at(std::size_t row, std::size_t col, std::size_t k) { return at(row * grid_ + col, k); }

  const std::vector<double>& values() const { return values_; }

  // Sum of class-k scores over the cells selected by `mask` (all cells when
  // the mask is default-constructed).
  double class_sum(std::size_t k) const;
  double class_sum(std::size_t k, const PatchMask& mask) const;

  // Throws DataError unless every entry lies in [0, 1].
  void validate() const;

 private:
  std::size_t grid_ = 0;
  std::size_t classes_ = 0;
  std::vector<double> values_;
};

}  // namespace plc
