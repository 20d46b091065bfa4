#pragma once

// On-disk formats. Everything is little-endian; tensors are f32 row-major.
//
// Factor checkpoint:
//   "FACT" | u16 version | u8 format | u8 strategy | u8 stages | u32 classes
//   per stage: u32 M | u32 d | u32 r1 | u32 r2 | u32 r3 | f32 s | factor payload
//   head_w (d_last x classes) | head_b (classes)
//   u32 CRC-32 of every preceding byte
//
// Backbone container (same framing, format tag 255):
//   "FACT" | u16 version | u8 255 | u32 image | u32 patch | u32 channels |
//   u32 classes | u32 stages | per stage u32 layers, dim, heads |
//   u32 tensors | per tensor: u32 name length, name, u32 ndim, u32 dims..., f32 data |
//   u32 CRC-32

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fact/factorization.hpp"
#include "fact/tensorization.hpp"
#include "fact/vit.hpp"

namespace fact {

static_assert(std::endian::native == std::endian::little, "byte order helpers assume a little-endian host");

inline constexpr char kMagic[4] = {'F', 'A', 'C', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kBackboneTag = 255;
inline constexpr std::size_t kCheckpointHeaderBytes = 4 + 2 + 1 + 1 + 1 + 4;
inline constexpr std::size_t kCheckpointStageHeaderBytes = 6 * 4;
inline constexpr std::size_t kCheckpointTrailerBytes = 4;

enum class CheckpointErrc { BadMagic = 1, BadVersion, BadCrc, Truncated, BadHeader, Io };

inline const char* errc_name(CheckpointErrc e) {
  switch (e) {
    case CheckpointErrc::BadMagic: return "bad-magic";
    case CheckpointErrc::BadVersion: return "bad-version";
    case CheckpointErrc::BadCrc: return "bad-crc";
    case CheckpointErrc::Truncated: return "truncated";
    case CheckpointErrc::BadHeader: return "bad-header";
    case CheckpointErrc::Io: return "io";
  }
  return "unknown";
}

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void f32(float v) { raw(&v, 4); }
  void bytes(const void* p, std::size_t n) { raw(p, n); }

  template <typename T>
  void tensor(const Tensor<T>& t) {
    for (T v : t.data()) f32(static_cast<float>(v));
  }

  // Appends the CRC of everything written so far.
  void seal() { u32(crc32_of(buf_.data(), buf_.size())); }

  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}

  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint16_t u16() { std::uint16_t v; raw(&v, 2); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  float f32() { float v; raw(&v, 4); return v; }

  template <typename T>
  Tensor<T> tensor(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    need(4 * n);
    std::vector<T> data(n);
    for (auto& x : data) x = static_cast<T>(f32());
    return Tensor<T>(std::move(shape), std::move(data), requires_grad);
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return buf_.size() - pos_; }

  // Checks magic and trailing CRC; leaves the cursor after the magic.
  void open(const std::string& what) {
    if (buf_.size() < 4 || std::memcmp(buf_.data(), kMagic, 4) != 0) {
      throw CheckpointError(CheckpointErrc::BadMagic, what + ": missing FACT magic");
    }
    if (buf_.size() < 4 + 2 + 1 + kCheckpointTrailerBytes) {
      throw CheckpointError(CheckpointErrc::Truncated, what + ": file too short");
    }
    pos_ = 4;
    const std::size_t body = buf_.size() - kCheckpointTrailerBytes;
    std::uint32_t stored;
    std::memcpy(&stored, buf_.data() + body, 4);
    end_ = body;
    crc_ok_ = crc32_of(buf_.data(), body) == stored;
  }

  bool crc_ok() const { return crc_ok_; }

  void need(std::size_t n) const {
    if (pos_ + n > end_) {
      throw CheckpointError(CheckpointErrc::Truncated, "needs " + std::to_string(n) + " more bytes at offset " +
                                                           std::to_string(pos_) + ", " +
                                                           std::to_string(end_ - std::min(pos_, end_)) + " left");
    }
  }

  bool at_end() const { return pos_ == end_; }

 private:
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
  bool crc_ok_ = false;
};

// Writes via a temporary file and rename so readers never see partial files.
inline void write_atomically(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrc::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrc::Io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::Io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

// ---------------------------------------------------------------------------
// Factor checkpoint

template <typename T = float>
struct FactorCheckpoint {
  Format format = Format::TensorTrain;
  Strategy strategy = Strategy::All;
  Adaptation<T> stages;  // may be empty (linear probe)
  Tensor<T> head_w;      // d_last x classes
  Tensor<T> head_b;      // classes

  std::size_t classes() const { return head_b.numel(); }
};

// Exact file size implied by the header fields.
inline std::size_t checkpoint_size(std::size_t factor_params, std::size_t stage_count, std::size_t head_params) {
  return kCheckpointHeaderBytes + stage_count * kCheckpointStageHeaderBytes + 4 * (factor_params + head_params) +
         kCheckpointTrailerBytes;
}

template <typename T>
std::vector<unsigned char> encode_checkpoint(const FactorCheckpoint<T>& ckpt) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(ckpt.format));
  w.u8(static_cast<std::uint8_t>(ckpt.strategy));
  w.u8(static_cast<std::uint8_t>(ckpt.stages.size()));
  w.u32(static_cast<std::uint32_t>(ckpt.classes()));
  for (const auto& s : ckpt.stages) {
    const auto& f = s.factors;
    if (f.format != ckpt.format) throw ConfigError("checkpoint: mixed factor formats across stages");
    w.u32(static_cast<std::uint32_t>(f.slices));
    w.u32(static_cast<std::uint32_t>(f.dim));
    w.u32(static_cast<std::uint32_t>(f.ranks.r1));
    w.u32(static_cast<std::uint32_t>(f.ranks.r2));
    w.u32(static_cast<std::uint32_t>(f.ranks.r3));
    w.f32(static_cast<float>(f.scale));
    for (const auto& t : f.parameters()) w.tensor(t);
  }
  w.tensor(ckpt.head_w);
  w.tensor(ckpt.head_b);
  w.seal();
  return w.buffer();
}

template <typename T = float>
FactorCheckpoint<T> decode_checkpoint(std::vector<unsigned char> bytes, const std::string& what = "checkpoint") {
  ByteReader r(std::move(bytes));
  r.open(what);
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrc::BadVersion, what + ": unsupported version " + std::to_string(version));
  }
  const auto format_tag = r.u8();
  if (format_tag == kBackboneTag) {
    throw CheckpointError(CheckpointErrc::BadHeader, what + ": is a backbone container, not a factor checkpoint");
  }
  if (format_tag > 2) throw CheckpointError(CheckpointErrc::BadHeader, what + ": unknown format tag " + std::to_string(format_tag));
  const auto strategy_tag = r.u8();
  if (strategy_tag > 3) throw CheckpointError(CheckpointErrc::BadHeader, what + ": unknown strategy tag " + std::to_string(strategy_tag));
  FactorCheckpoint<T> ckpt;
  ckpt.format = static_cast<Format>(format_tag);
  ckpt.strategy = static_cast<Strategy>(strategy_tag);
  const std::size_t stage_count = r.u8();
  const std::size_t classes = r.u32();
  std::size_t last_dim = 0;
  for (std::size_t k = 0; k < stage_count; ++k) {
    FactorSet<T> f;
    f.format = ckpt.format;
    f.slices = r.u32();
    f.dim = r.u32();
    f.ranks = {r.u32(), r.u32(), r.u32()};
    f.scale = static_cast<T>(r.f32());
    const std::size_t per_layer = slices_per_layer(ckpt.strategy);
    if (f.slices == 0 || f.slices % per_layer != 0 || f.dim == 0) {
      throw CheckpointError(CheckpointErrc::BadHeader, what + ": stage " + std::to_string(k) + " has M=" +
                                                           std::to_string(f.slices) + ", d=" + std::to_string(f.dim));
    }
    try {
      validate_ranks(f.format, f.dim, f.ranks);
    } catch (const ConfigError& e) {
      throw CheckpointError(CheckpointErrc::BadHeader, what + ": " + e.what());
    }
    std::vector<Tensor<T>> tensors;
    for (const auto& shape : f.parameter_shapes()) tensors.push_back(r.template tensor<T>(shape, true));
    f.assign_parameters(std::move(tensors));
    last_dim = f.dim;
    ckpt.stages.push_back({TensorizationMap::build(f.slices / per_layer, ckpt.strategy), std::move(f)});
  }
  if (stage_count == 0) {
    // Linear-probe checkpoints carry no factors; the head width is implied
    // by the remaining payload.
    if (classes == 0 || r.remaining() < 4 + 4 * classes || (r.remaining() - 4 - 4 * classes) % (4 * classes) != 0) {
      throw CheckpointError(CheckpointErrc::Truncated, what + ": head payload does not fit " + std::to_string(classes) + " classes");
    }
    last_dim = (r.remaining() - 4 - 4 * classes) / (4 * classes);
  }
  if (classes == 0) throw CheckpointError(CheckpointErrc::BadHeader, what + ": zero classes");
  ckpt.head_w = r.template tensor<T>({last_dim, classes}, true);
  ckpt.head_b = r.template tensor<T>({classes}, true);
  if (!r.at_end()) throw CheckpointError(CheckpointErrc::BadHeader, what + ": trailing bytes before CRC");
  if (!r.crc_ok()) throw CheckpointError(CheckpointErrc::BadCrc, what + ": CRC mismatch");
  return ckpt;
}

template <typename T>
void save_checkpoint(const FactorCheckpoint<T>& ckpt, const std::filesystem::path& path) {
  write_atomically(path, encode_checkpoint(ckpt));
}

template <typename T = float>
FactorCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Backbone container

template <typename T>
std::vector<unsigned char> encode_backbone(Backbone<T>& model) {
  const auto& c = model.config;
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kCheckpointVersion);
  w.u8(kBackboneTag);
  for (std::size_t v : {c.image_size, c.patch_size, c.channels, c.classes, c.stages.size()}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  for (const auto& s : c.stages) {
    w.u32(static_cast<std::uint32_t>(s.layers));
    w.u32(static_cast<std::uint32_t>(s.dim));
    w.u32(static_cast<std::uint32_t>(s.heads));
  }
  std::size_t count = 0;
  model.for_each_tensor([&](const std::string&, Tensor<T>&) { ++count; });
  w.u32(static_cast<std::uint32_t>(count));
  model.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(t.ndim()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    w.tensor(t);
  });
  w.seal();
  return w.buffer();
}

template <typename T = float>
Backbone<T> decode_backbone(std::vector<unsigned char> bytes, const std::string& what = "backbone") {
  ByteReader r(std::move(bytes));
  r.open(what);
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrc::BadVersion, what + ": unsupported version " + std::to_string(version));
  }
  if (r.u8() != kBackboneTag) throw CheckpointError(CheckpointErrc::BadHeader, what + ": not a backbone container");
  ViTConfig c;
  c.image_size = r.u32();
  c.patch_size = r.u32();
  c.channels = r.u32();
  c.classes = r.u32();
  const std::size_t stages = r.u32();
  if (stages == 0 || stages > 64) throw CheckpointError(CheckpointErrc::BadHeader, what + ": bad stage count");
  c.stages.clear();
  for (std::size_t k = 0; k < stages; ++k) {
    StageSpec s;
    s.layers = r.u32();
    s.dim = r.u32();
    s.heads = r.u32();
    c.stages.push_back(s);
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrc::BadHeader, what + ": " + e.what());
  }
  // Shapes come from a freshly built skeleton; the manifest must agree.
  auto model = init_backbone<T>(c, 0);
  const std::size_t count = r.u32();
  std::size_t seen = 0;
  model.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    ++seen;
    if (seen > count) throw CheckpointError(CheckpointErrc::BadHeader, what + ": manifest is missing " + name);
    const auto stored = r.str(r.u32());
    if (stored != name) {
      throw CheckpointError(CheckpointErrc::BadHeader, what + ": expected tensor " + name + ", found " + stored);
    }
    Shape shape(r.u32());
    for (auto& e : shape) e = r.u32();
    if (shape != t.shape()) {
      throw CheckpointError(CheckpointErrc::BadHeader, what + ": tensor " + name + " has shape " + to_string(shape) +
                                                           ", expected " + to_string(t.shape()));
    }
    t = r.template tensor<T>(shape);
  });
  if (seen != count || !r.at_end()) throw CheckpointError(CheckpointErrc::BadHeader, what + ": manifest length mismatch");
  if (!r.crc_ok()) throw CheckpointError(CheckpointErrc::BadCrc, what + ": CRC mismatch");
  return model;
}

template <typename T>
void save_backbone(Backbone<T>& model, const std::filesystem::path& path) {
  write_atomically(path, encode_backbone(model));
}

template <typename T = float>
Backbone<T> load_backbone(const std::filesystem::path& path) {
  return decode_backbone<T>(read_bytes(path), path.string());
}

}  // namespace fact
