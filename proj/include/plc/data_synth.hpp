#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plc/losses.hpp"
#include "plc/tensor.hpp"

namespace plc {

struct ClassSignature {
  double amplitude = 3.0;    // peak in noise standard deviations, signed
  double frequency = 0.0;    // stripe texture, cycles per pixel (0 = plain bump)
  double orientation = 0.0;  // stripe direction, radians
};

std::vector<ClassSignature> default_signatures(std::size_t classes);

struct SynthConfig {
  std::size_t image_side = 64;
  std::size_t grid = 8;
  std::size_t classes = 6;
  std::size_t boxed_classes = 4;  // classes 0..boxed_classes-1 can carry boxes
  std::size_t images = 4000;
  double annotated_fraction = 0.01;
  double label_noise = 0.0;      // flip rate on images without boxes
  double presence = 0.25;        // per-class blob probability
  double second_blob = 0.15;     // chance of a second blob of a present class
  double sigma_min = 3.0;        // blob std in pixels; boxes span +-2 sigma
  double sigma_max = 6.0;
  std::uint64_t seed = 7;
  std::vector<ClassSignature> signatures;  // empty: default_signatures(classes)

  void validate() const;
};

// Patch-space rectangle as stored in the manifest.
struct BoxRecord {
  std::size_t cls = 0;
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct Sample {
  std::string id;
  std::string image_file;  // relative to the dataset directory
  std::size_t side = 0;
  std::vector<float> image;  // side x side, row-major, in [-1, 1]
  Annotation ann;
  std::vector<BoxRecord> boxes;
};

struct Dataset {
  std::size_t side = 0;
  std::size_t grid = 0;
  std::size_t classes = 0;
  std::vector<Sample> samples;

  // [n,1,side,side] stack of the selected samples.
  Tensor images(const std::vector<std::size_t>& index) const;
  std::vector<const Annotation*> annotations(const std::vector<std::size_t>& index) const;
  std::vector<std::size_t> annotated_ids() const;
  std::vector<std::size_t> unannotated_ids() const;
};

// Patches whose overlap with the pixel rectangle [r0,r1) x [c0,c1) exceeds
// half the patch area.
PatchMask rasterize_box(double r0, double r1, double c0, double c1, std::size_t grid,
                        std::size_t patch_side);
// Row runs of a mask merged into rectangles; their union is the mask.
std::vector<BoxRecord> mask_to_rects(const PatchMask& mask, std::size_t cls);

// Writes manifest.json and images/<id>.plim under `dir`.
void generate(const SynthConfig& cfg, const std::filesystem::path& dir);

// Reads and validates a dataset; errors name the offending sample id.
Dataset load(const std::filesystem::path& dir, std::size_t grid);

// Manifest text for a loaded dataset (the same bytes generate() wrote).
std::string manifest_text(const Dataset& data);

std::vector<std::uint8_t> encode_image(const std::vector<float>& pixels, std::size_t side);
std::vector<float> decode_image(const std::vector<std::uint8_t>& bytes, std::size_t& side,
                                const std::string& id);

}  // namespace plc
