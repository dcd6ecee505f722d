#include "plc/data_synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <set>

#include <json.hpp>

#include "plc/error.hpp"

namespace plc {

namespace {

using json = nlohmann::json;

// Distribution code is hand-rolled because the standard distributions are
// not specified bit-for-bit across library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

constexpr char kImageMagic[4] = {'P', 'L', 'I', 'M'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw IoError("write failed for " + path.string());
}

struct Blob {
  std::size_t cls;
  double cy, cx, sy, sx;
};

json record_json(const Sample& s) {
  json boxes = json::array();
  for (const auto& b : s.boxes) {
    boxes.push_back({{"class", b.cls}, {"row0", b.row0}, {"col0", b.col0}, {"rows", b.rows},
                     {"cols", b.cols}});
  }
  std::vector<int> labels(s.ann.labels.begin(), s.ann.labels.end());
  std::vector<int> annotated(s.ann.annotated.begin(), s.ann.annotated.end());
  return json{{"id", s.id}, {"image_file", s.image_file}, {"labels", labels},
              {"annotated", annotated}, {"boxes", boxes}};
}

std::string dump_manifest(const std::vector<Sample>& samples) {
  json arr = json::array();
  for (const auto& s : samples) arr.push_back(record_json(s));
  return arr.dump(1) + "\n";
}

}  // namespace

std::vector<ClassSignature> default_signatures(std::size_t classes) {
  const double pi = std::numbers::pi;
  const std::vector<ClassSignature> base{
      {3.0, 0.0, 0.0},         {-3.0, 0.0, 0.0},       {3.0, 0.18, 0.0},
      {3.0, 0.18, pi / 2.0},   {-3.0, 0.18, pi / 4.0}, {3.0, 0.09, 3.0 * pi / 4.0},
  };
  std::vector<ClassSignature> out;
  for (std::size_t k = 0; k < classes; ++k) {
    ClassSignature s = base[k % base.size()];
    s.orientation += static_cast<double>(k / base.size()) * pi / 8.0;
    out.push_back(s);
  }
  return out;
}

void SynthConfig::validate() const {
  if (classes == 0) throw ConfigError("synth: classes must be >= 1");
  if (boxed_classes > classes) throw ConfigError("synth: boxed_classes exceeds classes");
  if (grid == 0 || image_side % grid != 0) {
    throw ConfigError("synth: image side must be a multiple of the grid");
  }
  if (images == 0) throw ConfigError("synth: images must be >= 1");
  for (double f : {annotated_fraction, label_noise, presence, second_blob}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("synth: fractions must lie in [0, 1]");
  }
  if (!(sigma_min > 0.0) || sigma_max < sigma_min) throw ConfigError("synth: bad sigma range");
  if (4.0 * sigma_max >= static_cast<double>(image_side)) {
    throw ConfigError("synth: blobs of +-2 sigma_max do not fit the image");
  }
  if (!signatures.empty() && signatures.size() != classes) {
    throw ConfigError("synth: need one signature per class");
  }
}

PatchMask rasterize_box(double r0, double r1, double c0, double c1, std::size_t grid,
                        std::size_t patch_side) {
  PatchMask m(grid);
  const double ps = static_cast<double>(patch_side);
  auto overlap = [ps](double a0, double a1, std::size_t i) {
    const double lo = static_cast<double>(i) * ps, hi = lo + ps;
    return std::max(0.0, std::min(a1, hi) - std::max(a0, lo));
  };
  for (std::size_t r = 0; r < grid; ++r) {
    const double oy = overlap(r0, r1, r);
    for (std::size_t c = 0; c < grid; ++c) {
      if (oy * overlap(c0, c1, c) > 0.5 * ps * ps) m.set(r, c);
    }
  }
  return m;
}

std::vector<BoxRecord> mask_to_rects(const PatchMask& mask, std::size_t cls) {
  std::vector<BoxRecord> out;
  const std::size_t P = mask.grid();
  std::vector<BoxRecord> open;
  for (std::size_t r = 0; r < P; ++r) {
    std::vector<BoxRecord> runs;
    for (std::size_t c = 0; c < P;) {
      if (!mask.get(r, c)) {
        ++c;
        continue;
      }
      std::size_t e = c;
      while (e < P && mask.get(r, e)) ++e;
      runs.push_back({cls, r, c, 1, e - c});
      c = e;
    }
    std::vector<BoxRecord> next;
    for (auto run : runs) {
      auto it = std::find_if(open.begin(), open.end(), [&](const BoxRecord& b) {
        return b.col0 == run.col0 && b.cols == run.cols && b.row0 + b.rows == r;
      });
      if (it != open.end()) {
        run.row0 = it->row0;
        run.rows = it->rows + 1;
        open.erase(it);
      }
      next.push_back(run);
    }
    out.insert(out.end(), open.begin(), open.end());
    open = std::move(next);
  }
  out.insert(out.end(), open.begin(), open.end());
  std::sort(out.begin(), out.end(), [](const BoxRecord& a, const BoxRecord& b) {
    return std::tie(a.row0, a.col0) < std::tie(b.row0, b.col0);
  });
  return out;
}

std::vector<std::uint8_t> encode_image(const std::vector<float>& pixels, std::size_t side) {
  if (pixels.size() != side * side) throw ShapeError("encode_image: pixel count mismatch");
  std::vector<std::uint8_t> out(kImageMagic, kImageMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(side));
  put_u32(out, static_cast<std::uint32_t>(side));
  put_u32(out, 1);
  for (float v : pixels) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

std::vector<float> decode_image(const std::vector<std::uint8_t>& bytes, std::size_t& side,
                                const std::string& id) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kImageMagic, 4) != 0) {
    throw DataError("sample " + id + ": image is not a PLIM file");
  }
  const std::uint32_t h = get_u32(&bytes[4]), w = get_u32(&bytes[8]), c = get_u32(&bytes[12]);
  if (h != w || c != 1) {
    throw DataError("sample " + id + ": expected a square single-channel image, got " +
                    std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
  }
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (bytes.size() != 16 + 4 * n) {
    throw DataError("sample " + id + ": image payload is " + std::to_string(bytes.size() - 16) +
                    " bytes, expected " + std::to_string(4 * n));
  }
  std::vector<float> px(n);
  for (std::size_t i = 0; i < n; ++i) px[i] = std::bit_cast<float>(get_u32(&bytes[16 + 4 * i]));
  side = h;
  return px;
}

void generate(const SynthConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  const auto sig = cfg.signatures.empty() ? default_signatures(cfg.classes) : cfg.signatures;
  const std::size_t S = cfg.image_side, K = cfg.classes, P = cfg.grid;
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());

  Rng rng(cfg.seed);
  std::vector<std::vector<Blob>> blobs(cfg.images);
  std::vector<Sample> samples(cfg.images);
  for (std::size_t i = 0; i < cfg.images; ++i) {
    Sample& s = samples[i];
    char name[32];
    std::snprintf(name, sizeof name, "s%06zu", i);
    s.id = name;
    s.image_file = "images/" + s.id + ".plim";
    s.side = S;
    s.ann = Annotation::empty(K, P);
    for (std::size_t k = 0; k < K; ++k) {
      if (!rng.bernoulli(cfg.presence)) continue;
      const std::size_t count = rng.bernoulli(cfg.second_blob) ? 2 : 1;
      for (std::size_t b = 0; b < count; ++b) {
        Blob blob{k, 0, 0, rng.uniform(cfg.sigma_min, cfg.sigma_max),
                  rng.uniform(cfg.sigma_min, cfg.sigma_max)};
        blob.cy = rng.uniform(2.0 * blob.sy, static_cast<double>(S) - 2.0 * blob.sy);
        blob.cx = rng.uniform(2.0 * blob.sx, static_cast<double>(S) - 2.0 * blob.sx);
        blobs[i].push_back(blob);
      }
      s.ann.labels[k] = 1;
    }
    std::vector<double> px(S * S);
    for (auto& v : px) v = rng.normal();
    for (const Blob& b : blobs[i]) {
      const ClassSignature& cs = sig[b.cls];
      const double m = cs.frequency > 0.0 ? 0.5 : 0.0;
      const double co = std::cos(cs.orientation), so = std::sin(cs.orientation);
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - b.cy;
          const double dx = static_cast<double>(x) + 0.5 - b.cx;
          const double g = std::exp(-0.5 * (dy * dy / (b.sy * b.sy) + dx * dx / (b.sx * b.sx)));
          if (g < 1e-4) continue;
          const double u = dx * co + dy * so;
          const double tex = (1.0 - m) + m * std::cos(2.0 * std::numbers::pi * cs.frequency * u);
          px[y * S + x] += cs.amplitude * g * tex;
        }
      }
    }
    s.image.resize(S * S);
    for (std::size_t j = 0; j < S * S; ++j) {
      s.image[j] = static_cast<float>(std::clamp(px[j] / 3.0, -1.0, 1.0));
    }
  }

  // Annotated images are drawn from those containing a boxable class.
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < cfg.images; ++i) {
    for (const Blob& b : blobs[i]) {
      if (b.cls < cfg.boxed_classes) {
        candidates.push_back(i);
        break;
      }
    }
  }
  const auto wanted = static_cast<std::size_t>(
      std::llround(cfg.annotated_fraction * static_cast<double>(cfg.images)));
  const std::size_t n_ann = std::min(wanted, candidates.size());
  for (std::size_t j = 0; j < n_ann; ++j) {
    std::swap(candidates[j], candidates[j + rng.below(candidates.size() - j)]);
  }
  std::vector<bool> annotated(cfg.images, false);
  for (std::size_t j = 0; j < n_ann; ++j) annotated[candidates[j]] = true;

  const std::size_t ps = S / P;
  for (std::size_t i = 0; i < cfg.images; ++i) {
    Sample& s = samples[i];
    if (annotated[i]) {
      for (std::size_t k = 0; k < cfg.boxed_classes; ++k) {
        PatchMask mask(P);
        for (const Blob& b : blobs[i]) {
          if (b.cls != k) continue;
          mask |= rasterize_box(b.cy - 2.0 * b.sy, b.cy + 2.0 * b.sy, b.cx - 2.0 * b.sx,
                                b.cx + 2.0 * b.sx, P, ps);
        }
        if (mask.empty()) continue;
        s.ann.annotated[k] = 1;
        s.ann.boxes[k] = mask;
        const auto rects = mask_to_rects(mask, k);
        s.boxes.insert(s.boxes.end(), rects.begin(), rects.end());
      }
    } else if (cfg.label_noise > 0.0) {
      for (std::size_t k = 0; k < K; ++k) {
        if (rng.bernoulli(cfg.label_noise)) s.ann.labels[k] ^= 1;
      }
    }
    const auto bytes = encode_image(s.image, S);
    write_file(dir / s.image_file, bytes.data(), bytes.size());
  }
  const std::string text = dump_manifest(samples);
  write_file(dir / "manifest.json", text.data(), text.size());
}

Tensor Dataset::images(const std::vector<std::size_t>& index) const {
  std::vector<double> v;
  v.reserve(index.size() * side * side);
  for (std::size_t i : index) v.insert(v.end(), samples.at(i).image.begin(), samples[i].image.end());
  return Tensor(Shape{index.size(), 1, side, side}, std::move(v));
}

std::vector<const Annotation*> Dataset::annotations(const std::vector<std::size_t>& index) const {
  std::vector<const Annotation*> out;
  for (std::size_t i : index) out.push_back(&samples.at(i).ann);
  return out;
}

std::vector<std::size_t> Dataset::annotated_ids() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].ann.any_annotated()) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::unannotated_ids() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].ann.any_annotated()) out.push_back(i);
  }
  return out;
}

Dataset load(const std::filesystem::path& dir, std::size_t grid) {
  if (grid == 0) throw ConfigError("load: grid must be >= 1");
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw IoError("no manifest at " + manifest_path.string());
  const auto raw = read_file(manifest_path);
  json arr;
  try {
    arr = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (!arr.is_array() || arr.empty()) throw DataError("manifest: expected a nonempty array");
  Dataset d;
  d.grid = grid;
  std::set<std::string> seen;
  for (const auto& rec : arr) {
    Sample s;
    if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string()) {
      throw DataError("manifest: record without a string id");
    }
    s.id = rec["id"].get<std::string>();
    const std::string& id = s.id;
    if (!seen.insert(id).second) throw DataError("sample " + id + ": duplicate id");
    try {
      s.image_file = rec.at("image_file").get<std::string>();
      for (int v : rec.at("labels").get<std::vector<int>>()) {
        if (v != 0 && v != 1) throw DataError("sample " + id + ": labels must be 0 or 1");
        s.ann.labels.push_back(static_cast<std::uint8_t>(v));
      }
      for (int v : rec.at("annotated").get<std::vector<int>>()) {
        if (v != 0 && v != 1) throw DataError("sample " + id + ": annotated must be 0 or 1");
        s.ann.annotated.push_back(static_cast<std::uint8_t>(v));
      }
      const std::size_t K = s.ann.labels.size();
      if (d.classes == 0) d.classes = K;
      if (K == 0 || K != d.classes) throw DataError("sample " + id + ": inconsistent class count");
      s.ann.boxes.assign(K, PatchMask(grid));
      for (const auto& b : rec.at("boxes")) {
        BoxRecord r{b.at("class").get<std::size_t>(), b.at("row0").get<std::size_t>(),
                    b.at("col0").get<std::size_t>(), b.at("rows").get<std::size_t>(),
                    b.at("cols").get<std::size_t>()};
        if (r.cls >= K) throw DataError("sample " + id + ": box class out of range");
        if (r.rows == 0 || r.cols == 0 || r.row0 + r.rows > grid || r.col0 + r.cols > grid) {
          throw DataError("sample " + id + ": box outside the " + std::to_string(grid) + "x" +
                          std::to_string(grid) + " grid");
        }
        for (std::size_t i = 0; i < r.rows; ++i)
          for (std::size_t j = 0; j < r.cols; ++j) s.ann.boxes[r.cls].set(r.row0 + i, r.col0 + j);
        s.boxes.push_back(r);
      }
    } catch (const json::exception& e) {
      throw DataError("sample " + id + ": " + e.what());
    }
    s.ann.validate(d.classes, grid, id);
    s.image = decode_image(read_file(dir / s.image_file), s.side, id);
    if (d.side == 0) d.side = s.side;
    if (s.side != d.side) throw DataError("sample " + id + ": image side differs from the dataset");
    if (d.side % grid != 0) throw DataError("sample " + id + ": image side not divisible by grid");
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::string manifest_text(const Dataset& data) { return dump_manifest(data.samples); }

}  // namespace plc
