#pragma once

// In-memory image datasets: a seeded synthetic generator with controllable
// domain shift, and a raw u8 directory format.
//
// Images are stored as float CHW planes, one image after another.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fact/random.hpp"

namespace fact {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::size_t channels = 0;
  std::size_t image_size = 0;
  std::size_t classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * image_size * image_size; }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_numel(), image_numel());
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{channels, image_size, classes, {}, {}};
    out.pixels.reserve(indices.size() * image_numel());
    for (auto i : indices) {
      const auto img = image(i);
      out.pixels.insert(out.pixels.end(), img.begin(), img.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }

  Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    return subset(idx);
  }

  void append(const Dataset& other) {
    if (size() == 0) {
      channels = other.channels;
      image_size = other.image_size;
      classes = other.classes;
    } else if (other.channels != channels || other.image_size != image_size) {
      throw DataError("cannot append datasets with different image geometry");
    }
    classes = std::max(classes, other.classes);
    pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Per-channel (x - mean) / std, in place.
inline void normalize(Dataset& data, std::span<const float> mean, std::span<const float> stddev) {
  if (mean.size() != data.channels || stddev.size() != data.channels) {
    throw DataError("normalization constants do not match " + std::to_string(data.channels) + " channels");
  }
  const std::size_t plane = data.image_size * data.image_size;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (std::size_t c = 0; c < data.channels; ++c) {
      float* p = data.pixels.data() + i * data.image_numel() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - mean[c]) / stddev[c];
    }
}

inline void normalize(Dataset& data, float mean, float stddev) {
  std::vector<float> m(data.channels, mean), s(data.channels, stddev);
  normalize(data, m, s);
}

// ---------------------------------------------------------------------------
// Synthetic blob images

struct DomainShift {
  double rotation_deg = 0.0;  // rotation of blob layouts about the image centre
  double brightness = 0.0;    // additive offset applied to every pixel
};

struct SyntheticSpec {
  std::uint64_t seed = 0;       // sampling stream
  std::uint64_t task_seed = 0;  // class prototypes
  std::size_t classes = 10;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t blobs = 3;
  double noise = 0.1;
  double jitter = 0.04;
  DomainShift shift;
  std::size_t train = 800;
  std::size_t val = 200;
  std::size_t test = 500;
};

namespace detail {

struct Blob {
  double x = 0, y = 0, radius = 0;
  std::array<double, 4> color{};
};

inline std::vector<std::vector<Blob>> prototypes(const SyntheticSpec& spec) {
  Rng rng(derive_seed(spec.task_seed, 0xB10B));
  std::vector<std::vector<Blob>> out(spec.classes);
  for (auto& blobs : out) {
    for (std::size_t k = 0; k < spec.blobs; ++k) {
      Blob b;
      b.x = rng.uniform(0.2, 0.8);
      b.y = rng.uniform(0.2, 0.8);
      b.radius = rng.uniform(0.07, 0.14);
      for (auto& c : b.color) c = rng.uniform(0.2, 1.0);
      blobs.push_back(b);
    }
  }
  return out;
}

inline void render(const std::vector<Blob>& blobs, const SyntheticSpec& spec, Rng& rng, float* dst) {
  const double theta = spec.shift.rotation_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);
  const std::size_t s = spec.image_size;
  const std::size_t plane = s * s;
  std::fill(dst, dst + plane * spec.channels, 0.0f);
  for (const auto& b : blobs) {
    const double px = b.x + spec.jitter * rng.normal();
    const double py = b.y + spec.jitter * rng.normal();
    const double amp = rng.uniform(0.7, 1.3);
    const double cx = 0.5 + ct * (px - 0.5) - st * (py - 0.5);
    const double cy = 0.5 + st * (px - 0.5) + ct * (py - 0.5);
    const double inv = 1.0 / (2.0 * b.radius * b.radius);
    for (std::size_t yy = 0; yy < s; ++yy)
      for (std::size_t xx = 0; xx < s; ++xx) {
        const double u = (static_cast<double>(xx) + 0.5) / static_cast<double>(s) - cx;
        const double v = (static_cast<double>(yy) + 0.5) / static_cast<double>(s) - cy;
        const double w = amp * std::exp(-(u * u + v * v) * inv);
        for (std::size_t c = 0; c < spec.channels; ++c)
          dst[c * plane + yy * s + xx] += static_cast<float>(w * b.color[c % b.color.size()]);
      }
  }
  for (std::size_t i = 0; i < plane * spec.channels; ++i) {
    const double v = dst[i] + spec.shift.brightness + spec.noise * rng.normal();
    dst[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

}  // namespace detail

// Balanced-ish random labels; pixel values in [0, 1].
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t count, std::uint64_t stream) {
  if (spec.classes < 2) throw DataError("synthetic data needs at least 2 classes");
  if (spec.image_size == 0 || spec.channels == 0) throw DataError("synthetic data needs a positive image size");
  const auto protos = detail::prototypes(spec);
  Dataset out{spec.channels, spec.image_size, spec.classes, {}, {}};
  out.pixels.resize(count * out.image_numel());
  Rng rng(derive_seed(spec.seed, stream));
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(rng.below(spec.classes));
    out.labels.push_back(label);
    detail::render(protos[static_cast<std::size_t>(label)], spec, rng, out.pixels.data() + i * out.image_numel());
  }
  return out;
}

// Disjoint train/val/test draws (independent streams of the same seed).
inline DataSplits generate_synthetic(const SyntheticSpec& spec) {
  return {generate_synthetic(spec, spec.train, 1), generate_synthetic(spec, spec.val, 2),
          generate_synthetic(spec, spec.test, 3)};
}

// ---------------------------------------------------------------------------
// Binary image directory:
//   index.bin   u32 count, u32 H, u32 W, u32 C (little-endian)
//   images.bin  count * H * W * C bytes, each image HWC
//   labels.bin  count * u32

namespace detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline std::uint32_t get_u32(const std::vector<unsigned char>& buf, std::size_t offset) {
  return static_cast<std::uint32_t>(buf[offset]) | (static_cast<std::uint32_t>(buf[offset + 1]) << 8) |
         (static_cast<std::uint32_t>(buf[offset + 2]) << 16) | (static_cast<std::uint32_t>(buf[offset + 3]) << 24);
}

}  // namespace detail

// Pixels are quantized from [0, 1] to u8.
inline void write_binary_images(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t s = data.image_size, c = data.channels, plane = s * s;
  {
    std::ofstream idx(dir / "index.bin", std::ios::binary);
    for (std::size_t v : {data.size(), s, s, c}) detail::put_u32(idx, static_cast<std::uint32_t>(v));
  }
  {
    std::ofstream img(dir / "images.bin", std::ios::binary);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto src = data.image(i);
      for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t k = 0; k < c; ++k) {
          const float v = std::clamp(src[k * plane + p], 0.0f, 1.0f);
          img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
        }
    }
  }
  std::ofstream lab(dir / "labels.bin", std::ios::binary);
  for (int l : data.labels) detail::put_u32(lab, static_cast<std::uint32_t>(l));
}

inline Dataset load_binary_images(const std::filesystem::path& dir) {
  const auto index = detail::read_file(dir / "index.bin");
  if (index.size() != 16) throw DataError(dir.string() + "/index.bin: expected 16 bytes, got " + std::to_string(index.size()));
  const std::size_t count = detail::get_u32(index, 0), h = detail::get_u32(index, 4),
                    w = detail::get_u32(index, 8), c = detail::get_u32(index, 12);
  if (h != w || h == 0 || c == 0) {
    throw DataError(dir.string() + ": only square images are supported, got " + std::to_string(h) + "x" +
                    std::to_string(w) + "x" + std::to_string(c));
  }
  const auto images = detail::read_file(dir / "images.bin");
  const auto labels = detail::read_file(dir / "labels.bin");
  if (images.size() != count * h * w * c) {
    throw DataError(dir.string() + "/images.bin: expected " + std::to_string(count * h * w * c) + " bytes, got " +
                    std::to_string(images.size()));
  }
  if (labels.size() != 4 * count) {
    throw DataError(dir.string() + "/labels.bin: expected " + std::to_string(4 * count) + " bytes, got " +
                    std::to_string(labels.size()));
  }
  Dataset out{c, h, 0, std::vector<float>(count * c * h * w), {}};
  const std::size_t plane = h * w;
  int max_label = -1;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t k = 0; k < c; ++k)
        out.pixels[i * c * plane + k * plane + p] = static_cast<float>(images[(i * plane + p) * c + k]) / 255.0f;
    const auto label = static_cast<int>(detail::get_u32(labels, 4 * i));
    out.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  out.classes = static_cast<std::size_t>(max_label + 1);
  return out;
}

}  // namespace fact
