#pragma once

// Bijection between a transformer's d x d weight blocks and the slice index
// of the stacked increment tensor.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fact/factorization.hpp"

namespace fact {

// QueryValue covers only {W_q, W_v} per layer (M = 2L), the LoRA layout.
enum class Strategy : std::uint8_t { All = 0, MhsaOnly = 1, FfnOnly = 2, QueryValue = 3 };

enum class Role : std::uint8_t { Query, Key, Value, Output, Up, Down };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::All: return "all";
    case Strategy::MhsaOnly: return "mhsa";
    case Strategy::FfnOnly: return "ffn";
    case Strategy::QueryValue: return "qv";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  if (name == "all") return Strategy::All;
  if (name == "mhsa") return Strategy::MhsaOnly;
  if (name == "ffn") return Strategy::FfnOnly;
  if (name == "qv") return Strategy::QueryValue;
  throw ConfigError("unknown tensorization strategy '" + std::string(name) +
                    "' (expected all, mhsa, ffn or qv)");
}

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::Query: return "q";
    case Role::Key: return "k";
    case Role::Value: return "v";
    case Role::Output: return "o";
    case Role::Up: return "up";
    case Role::Down: return "down";
  }
  return "?";
}

inline std::size_t slices_per_layer(Strategy s) {
  switch (s) {
    case Strategy::All: return 12;
    case Strategy::MhsaOnly: return 4;
    case Strategy::FfnOnly: return 8;
    case Strategy::QueryValue: return 2;
  }
  return 0;
}

// Up blocks are column blocks of W_up (d x 4d); Down blocks are row blocks of
// W_down (4d x d). Attention roles always use block 0.
struct SliceEntry {
  std::size_t layer = 0;
  Role role = Role::Query;
  std::size_t block = 0;

  bool operator==(const SliceEntry&) const = default;
};

inline constexpr std::size_t kFfnBlocks = 4;

class TensorizationMap {
 public:
  TensorizationMap() = default;

  // Per-layer order: q, k, v, o, up(1..4), down(1..4), restricted to the
  // roles the strategy covers.
  static TensorizationMap build(std::size_t layers, Strategy strategy) {
    TensorizationMap map;
    map.strategy_ = strategy;
    map.layers_ = layers;
    const bool attn = strategy == Strategy::All || strategy == Strategy::MhsaOnly;
    const bool ffn = strategy == Strategy::All || strategy == Strategy::FfnOnly;
    for (std::size_t j = 0; j < layers; ++j) {
      if (attn) {
        for (Role r : {Role::Query, Role::Key, Role::Value, Role::Output}) map.entries_.push_back({j, r, 0});
      } else if (strategy == Strategy::QueryValue) {
        map.entries_.push_back({j, Role::Query, 0});
        map.entries_.push_back({j, Role::Value, 0});
      }
      if (ffn) {
        for (std::size_t b = 0; b < kFfnBlocks; ++b) map.entries_.push_back({j, Role::Up, b});
        for (std::size_t b = 0; b < kFfnBlocks; ++b) map.entries_.push_back({j, Role::Down, b});
      }
    }
    map.lookup_.assign(layers * kLookupStride, kNone);
    for (std::size_t i = 0; i < map.entries_.size(); ++i) {
      const auto& e = map.entries_[i];
      map.lookup_[key(e.layer, e.role, e.block)] = i;
    }
    return map;
  }

  Strategy strategy() const { return strategy_; }
  std::size_t layers() const { return layers_; }
  std::size_t slices() const { return entries_.size(); }
  const std::vector<SliceEntry>& entries() const& { return entries_; }
  std::vector<SliceEntry> entries() && { return std::move(entries_); }
  const SliceEntry& entry(std::size_t i) const { return entries_.at(i); }

  std::optional<std::size_t> find(std::size_t layer, Role role, std::size_t block = 0) const {
    if (layer >= layers_ || block >= kFfnBlocks) return std::nullopt;
    const auto idx = lookup_[key(layer, role, block)];
    if (idx == kNone) return std::nullopt;
    return idx;
  }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  static constexpr std::size_t kLookupStride = 6 * kFfnBlocks;
  static std::size_t key(std::size_t layer, Role role, std::size_t block) {
    return layer * kLookupStride + static_cast<std::size_t>(role) * kFfnBlocks + block;
  }

  Strategy strategy_ = Strategy::All;
  std::size_t layers_ = 0;
  std::vector<SliceEntry> entries_;
  std::vector<std::size_t> lookup_;
};

}  // namespace fact
