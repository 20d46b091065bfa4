#pragma once

// A small (optionally staged) Vision Transformer whose attention and FFN
// projections can be augmented by factorized increments.
//
// Token rows are laid out sample-major: rows [b*N, (b+1)*N) belong to sample
// b, with the cls token first. A plain ViT is a single stage; later stages
// halve the token grid with a 2x2 merge followed by a frozen projection.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fact/factorization.hpp"
#include "fact/random.hpp"
#include "fact/tensor.hpp"
#include "fact/tensorization.hpp"

namespace fact {

inline constexpr std::size_t kMlpRatio = 4;

struct StageSpec {
  std::size_t layers = 1;
  std::size_t dim = 16;
  std::size_t heads = 1;

  bool operator==(const StageSpec&) const = default;
};

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t classes = 10;
  std::vector<StageSpec> stages{{2, 32, 4}};

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_features() const { return channels * patch_size * patch_size; }
  std::size_t total_layers() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.layers;
    return n;
  }
  // Tokens (cls included) seen by stage k.
  std::size_t tokens(std::size_t stage) const {
    const std::size_t g = grid() >> stage;
    return 1 + g * g;
  }
  std::size_t final_dim() const { return stages.back().dim; }

  void validate() const {
    if (stages.empty()) throw ConfigError("model needs at least one stage");
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image size " + std::to_string(image_size) +
                        " is not divisible by patch size " + std::to_string(patch_size));
    }
    if (channels == 0 || classes == 0) throw ConfigError("channels and classes must be positive");
    for (std::size_t k = 0; k < stages.size(); ++k) {
      const auto& s = stages[k];
      if (s.layers == 0 || s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0) {
        throw ConfigError("stage " + std::to_string(k) + ": dim " + std::to_string(s.dim) +
                          " must be a positive multiple of heads " + std::to_string(s.heads));
      }
      if (k > 0 && (grid() % (std::size_t{1} << k)) != 0) {
        throw ConfigError("stage " + std::to_string(k) + ": token grid " + std::to_string(grid()) +
                          " cannot be merged 2x2 " + std::to_string(k) + " times");
      }
    }
  }

  bool operator==(const ViTConfig&) const = default;
};

// Dense parameter count without allocating anything.
inline std::size_t backbone_param_count(const ViTConfig& c, bool include_head) {
  const std::size_t d0 = c.stages.front().dim;
  std::size_t n = c.patch_features() * d0 + d0 + d0 + c.tokens(0) * d0;
  for (std::size_t k = 0; k < c.stages.size(); ++k) {
    const std::size_t d = c.stages[k].dim;
    const std::size_t h = kMlpRatio * d;
    const std::size_t per_layer = 4 * (d * d + d) + (d * h + h) + (h * d + d) + 4 * d;
    n += c.stages[k].layers * per_layer;
    if (k > 0) {
      const std::size_t prev = c.stages[k - 1].dim;
      n += 2 * 4 * prev + 4 * prev * d + prev * d;
    }
  }
  n += 2 * c.final_dim();
  if (include_head) n += c.final_dim() * c.classes + c.classes;
  return n;
}

// Per-stage increment tensor shape M x d x d.
struct StageShape {
  std::size_t layers = 0;
  std::size_t dim = 0;
  std::size_t slices = 0;

  Shape shape() const { return {slices, dim, dim}; }
};

struct StagePartition {
  Strategy strategy = Strategy::All;
  std::vector<StageShape> stages;

  std::size_t param_count(Format format, const Ranks& ranks) const {
    std::size_t n = 0;
    for (const auto& s : stages) n += fact::param_count(format, s.slices, s.dim, ranks);
    return n;
  }
};

inline StagePartition partition(const std::vector<StageSpec>& stages, Strategy strategy = Strategy::All) {
  StagePartition p;
  p.strategy = strategy;
  for (const auto& s : stages) p.stages.push_back({s.layers, s.dim, slices_per_layer(strategy) * s.layers});
  return p;
}

// Trainable-factor count for a plain L-layer model of width d.
inline std::size_t param_count(Format format, Strategy strategy, std::size_t layers, std::size_t dim,
                               std::size_t rank) {
  return param_count(format, slices_per_layer(strategy) * layers, dim, Ranks::uniform(format, rank));
}

template <typename T = float>
struct LayerWeights {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> w_up, b_up, w_down, b_down;

  template <typename F>
  void for_each(F&& f) {
    f("ln1_g", ln1_g); f("ln1_b", ln1_b);
    f("wq", wq); f("bq", bq); f("wk", wk); f("bk", bk);
    f("wv", wv); f("bv", bv); f("wo", wo); f("bo", bo);
    f("ln2_g", ln2_g); f("ln2_b", ln2_b);
    f("w_up", w_up); f("b_up", b_up); f("w_down", w_down); f("b_down", b_down);
  }

  Tensor<T>& matrix(Role role) {
    switch (role) {
      case Role::Query: return wq;
      case Role::Key: return wk;
      case Role::Value: return wv;
      case Role::Output: return wo;
      case Role::Up: return w_up;
      case Role::Down: return w_down;
    }
    return wq;
  }
};

// Joins stage k-1 to stage k: 2x2 token merge, norm, projection. The cls
// token is carried through its own projection.
template <typename T = float>
struct Connector {
  Tensor<T> norm_g, norm_b;  // 4 * d_prev
  Tensor<T> proj;            // 4 d_prev x d
  Tensor<T> cls_proj;        // d_prev x d

  template <typename F>
  void for_each(F&& f) {
    f("norm_g", norm_g); f("norm_b", norm_b); f("proj", proj); f("cls_proj", cls_proj);
  }
};

template <typename T = float>
struct Backbone {
  ViTConfig config;
  Tensor<T> patch_w, patch_b, cls, pos;
  std::vector<std::vector<LayerWeights<T>>> stages;
  std::vector<Connector<T>> connectors;  // connectors[k-1] feeds stage k
  Tensor<T> final_g, final_b;
  Tensor<T> head_w, head_b;

  // Visits every tensor in manifest order; the head comes last.
  template <typename F>
  void for_each_tensor(F&& f, bool include_head = true) {
    f(std::string("patch_w"), patch_w);
    f(std::string("patch_b"), patch_b);
    f(std::string("cls"), cls);
    f(std::string("pos"), pos);
    for (std::size_t k = 0; k < stages.size(); ++k) {
      if (k > 0) {
        connectors[k - 1].for_each([&](const char* name, Tensor<T>& t) {
          f("merge" + std::to_string(k) + "." + name, t);
        });
      }
      for (std::size_t j = 0; j < stages[k].size(); ++j) {
        stages[k][j].for_each([&](const char* name, Tensor<T>& t) {
          f("s" + std::to_string(k) + ".l" + std::to_string(j) + "." + name, t);
        });
      }
    }
    f(std::string("final_g"), final_g);
    f(std::string("final_b"), final_b);
    if (include_head) {
      f(std::string("head_w"), head_w);
      f(std::string("head_b"), head_b);
    }
  }

  std::vector<Tensor<T>> tensors(bool include_head = true) {
    std::vector<Tensor<T>> out;
    for_each_tensor([&](const std::string&, Tensor<T>& t) { out.push_back(t); }, include_head);
    return out;
  }

  std::vector<Tensor<T>> head_parameters() const { return {head_w, head_b}; }

  std::size_t dense_count(bool include_head) {
    std::size_t n = 0;
    for (const auto& t : tensors(include_head)) n += t.numel();
    return n;
  }

  Backbone clone() const {
    Backbone copy = *this;
    copy.for_each_tensor([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return copy;
  }

  void set_requires_grad(bool flag, bool include_head) {
    for_each_tensor([flag](const std::string&, Tensor<T>& t) { t.set_requires_grad(flag); }, include_head);
  }

  void zero_grad() {
    for_each_tensor([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  // Zero head for `classes` outputs (head init is always zero).
  void reset_head(std::size_t classes) {
    config.classes = classes;
    head_w = Tensor<T>::zeros({config.final_dim(), classes});
    head_b = Tensor<T>::zeros({classes});
  }
};

namespace detail {

template <typename T>
Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> data(fan_in * fan_out);
  for (auto& x : data) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>({fan_in, fan_out}, std::move(data));
}

template <typename T>
Tensor<T> small_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> data(numel_of(shape));
  for (auto& x : data) x = static_cast<T>(stddev * rng.normal());
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace detail

// Freshly initialized backbone (the starting point for pre-training).
// Matrices are Xavier-uniform, biases zero, norms identity, cls/pos N(0, 0.02).
template <typename T = float>
Backbone<T> init_backbone(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Backbone<T> m;
  m.config = config;
  const std::size_t d0 = config.stages.front().dim;
  m.patch_w = detail::xavier<T>(config.patch_features(), d0, rng);
  m.patch_b = Tensor<T>::zeros({d0});
  m.cls = detail::small_normal<T>({1, d0}, 0.02, rng);
  m.pos = detail::small_normal<T>({config.tokens(0), d0}, 0.02, rng);
  for (std::size_t k = 0; k < config.stages.size(); ++k) {
    const std::size_t d = config.stages[k].dim;
    const std::size_t h = kMlpRatio * d;
    if (k > 0) {
      const std::size_t prev = config.stages[k - 1].dim;
      Connector<T> c;
      c.norm_g = Tensor<T>::full({4 * prev}, T{1});
      c.norm_b = Tensor<T>::zeros({4 * prev});
      c.proj = detail::xavier<T>(4 * prev, d, rng);
      c.cls_proj = detail::xavier<T>(prev, d, rng);
      m.connectors.push_back(std::move(c));
    }
    std::vector<LayerWeights<T>> layers;
    for (std::size_t j = 0; j < config.stages[k].layers; ++j) {
      LayerWeights<T> w;
      w.ln1_g = Tensor<T>::full({d}, T{1});
      w.ln1_b = Tensor<T>::zeros({d});
      w.wq = detail::xavier<T>(d, d, rng); w.bq = Tensor<T>::zeros({d});
      w.wk = detail::xavier<T>(d, d, rng); w.bk = Tensor<T>::zeros({d});
      w.wv = detail::xavier<T>(d, d, rng); w.bv = Tensor<T>::zeros({d});
      w.wo = detail::xavier<T>(d, d, rng); w.bo = Tensor<T>::zeros({d});
      w.ln2_g = Tensor<T>::full({d}, T{1});
      w.ln2_b = Tensor<T>::zeros({d});
      w.w_up = detail::xavier<T>(d, h, rng); w.b_up = Tensor<T>::zeros({h});
      w.w_down = detail::xavier<T>(h, d, rng); w.b_down = Tensor<T>::zeros({d});
      layers.push_back(std::move(w));
    }
    m.stages.push_back(std::move(layers));
  }
  m.final_g = Tensor<T>::full({config.final_dim()}, T{1});
  m.final_b = Tensor<T>::zeros({config.final_dim()});
  m.reset_head(config.classes);
  return m;
}

// ---------------------------------------------------------------------------
// Adaptation: one (map, factors) pair per stage.

template <typename T = float>
struct StageAdapter {
  TensorizationMap map;
  FactorSet<T> factors;
};

template <typename T = float>
using Adaptation = std::vector<StageAdapter<T>>;

// Independently seeded factor sets, one per stage.
template <typename T = float>
Adaptation<T> init_adaptation(const ViTConfig& config, Strategy strategy, Format format,
                              std::size_t rank, T scale, std::uint64_t seed) {
  Adaptation<T> out;
  for (std::size_t k = 0; k < config.stages.size(); ++k) {
    const auto& s = config.stages[k];
    auto map = TensorizationMap::build(s.layers, strategy);
    auto factors = init_factors<T>(format, map.slices(), s.dim, Ranks::uniform(format, rank), scale,
                                   derive_seed(seed, k));
    out.push_back({std::move(map), std::move(factors)});
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> adaptation_parameters(const Adaptation<T>& a) {
  std::vector<Tensor<T>> out;
  for (const auto& s : a)
    for (const auto& t : s.factors.parameters()) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Dense block access in map order.

template <typename T>
Tensor<T> extract_block(LayerWeights<T>& w, Role role, std::size_t block, std::size_t d) {
  auto& m = w.matrix(role);
  if (role == Role::Up) {
    NoGradGuard ng;
    return slice_cols(m, block * d, (block + 1) * d);
  }
  if (role == Role::Down) {
    NoGradGuard ng;
    return slice0(m, block * d, (block + 1) * d);
  }
  return m.detach();
}

template <typename T>
void store_block(LayerWeights<T>& w, Role role, std::size_t block, std::size_t d, const Tensor<T>& value) {
  auto dst = w.matrix(role).data();
  const auto src = value.data();
  if (role == Role::Up) {
    const std::size_t width = kMlpRatio * d;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) dst[i * width + block * d + j] = src[i * d + j];
  } else if (role == Role::Down) {
    std::copy(src.begin(), src.end(), dst.begin() + block * d * d);
  } else {
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

// d x d blocks of one stage, in map order.
template <typename T>
std::vector<Tensor<T>> split_blocks(Backbone<T>& model, std::size_t stage, const TensorizationMap& map) {
  const std::size_t d = model.config.stages.at(stage).dim;
  std::vector<Tensor<T>> out;
  out.reserve(map.slices());
  for (const auto& e : map.entries()) out.push_back(extract_block(model.stages[stage].at(e.layer), e.role, e.block, d));
  return out;
}

template <typename T>
void assemble_blocks(Backbone<T>& model, std::size_t stage, const TensorizationMap& map,
                     std::span<const Tensor<T>> blocks) {
  const std::size_t d = model.config.stages.at(stage).dim;
  if (blocks.size() != map.slices()) throw DimensionError("assemble_blocks: block count mismatch");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& e = map.entry(i);
    store_block(model.stages[stage].at(e.layer), e.role, e.block, d, blocks[i]);
  }
}

// Absorbs every stage's increment into the dense weights.
template <typename T>
void merge_adaptation(Backbone<T>& model, const Adaptation<T>& adaptation) {
  if (adaptation.size() != model.stages.size()) {
    throw DimensionError("merge: adaptation has " + std::to_string(adaptation.size()) +
                         " stages, model has " + std::to_string(model.stages.size()));
  }
  for (std::size_t k = 0; k < adaptation.size(); ++k) {
    const auto& a = adaptation[k];
    if (a.factors.dim != model.config.stages[k].dim || a.map.layers() != model.stages[k].size() ||
        a.map.slices() != a.factors.slices) {
      throw DimensionError("merge: stage " + std::to_string(k) + " factors (M=" +
                           std::to_string(a.factors.slices) + ", d=" + std::to_string(a.factors.dim) +
                           ") do not fit the backbone");
    }
    auto blocks = split_blocks(model, k, a.map);
    merge_into(a.factors, std::span<Tensor<T>>(blocks));
    assemble_blocks(model, k, a.map, std::span<const Tensor<T>>(blocks));
  }
}

// ---------------------------------------------------------------------------
// Forward pass

// HeadSum evaluates the FFN as sum_i GELU(X W_up^(i)) W_down^(i); Monolithic
// evaluates GELU(X W_up) W_down with the block increments concatenated.
// GELU is elementwise, so both are the same function.
enum class FfnForm { HeadSum, Monolithic };

struct ForwardOptions {
  FfnForm ffn_form = FfnForm::HeadSum;
};

namespace detail {

template <typename T>
const StageAdapter<T>* stage_adapter(std::span<const StageAdapter<T>> adaptation, std::size_t stage) {
  if (adaptation.empty()) return nullptr;
  return &adaptation[stage];
}

// X W + b, plus s X dW_slice when the adapter covers (layer, role, block).
template <typename T>
Tensor<T> projection(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                     const StageAdapter<T>* adapter, std::size_t layer, Role role, std::size_t block = 0) {
  auto y = add_bias(matmul(x, w), b);
  if (adapter) {
    if (auto idx = adapter->map.find(layer, role, block)) {
      y = add(y, contract_forward(adapter->factors, *idx, x));
    }
  }
  return y;
}

template <typename T>
Tensor<T> patchify(std::span<const T> images, std::size_t batch, const ViTConfig& c) {
  const std::size_t g = c.grid(), p = c.patch_size, s = c.image_size, ch = c.channels;
  const std::size_t features = c.patch_features();
  std::vector<T> out(batch * g * g * features);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* dst = out.data() + ((b * g + gy) * g + gx) * features;
        for (std::size_t k = 0; k < ch; ++k)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              *dst++ = images[((b * ch + k) * s + gy * p + y) * s + gx * p + x];
      }
  return Tensor<T>({batch * g * g, features}, std::move(out));
}

}  // namespace detail

template <typename T>
Tensor<T> mhsa_forward(const Tensor<T>& x, LayerWeights<T>& w, std::size_t layer, std::size_t heads,
                       std::size_t batch, std::size_t tokens, const StageAdapter<T>* adapter) {
  const std::size_t d = x.dim(1);
  if (x.dim(0) != batch * tokens) {
    throw DimensionError("mhsa: " + to_string(x.shape()) + " is not " + std::to_string(batch) + "x" +
                         std::to_string(tokens) + " tokens");
  }
  if (adapter && adapter->factors.dim != d) {
    throw DimensionError("mhsa: factor dimension " + std::to_string(adapter->factors.dim) +
                         " does not match hidden size " + std::to_string(d));
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto q = detail::projection(x, w.wq, w.bq, adapter, layer, Role::Query);
  auto k = detail::projection(x, w.wk, w.bk, adapter, layer, Role::Key);
  auto v = detail::projection(x, w.wv, w.bv, adapter, layer, Role::Value);
  std::vector<Tensor<T>> samples;
  samples.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto qb = slice0(q, b * tokens, (b + 1) * tokens);
    auto kb = slice0(k, b * tokens, (b + 1) * tokens);
    auto vb = slice0(v, b * tokens, (b + 1) * tokens);
    if (heads == 1) {
      samples.push_back(matmul(softmax_rows(scale(matmul_nt(qb, kb), inv_sqrt)), vb));
      continue;
    }
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = slice_cols(qb, h * dh, (h + 1) * dh);
      auto kh = slice_cols(kb, h * dh, (h + 1) * dh);
      auto vh = slice_cols(vb, h * dh, (h + 1) * dh);
      outs.push_back(matmul(softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt)), vh));
    }
    samples.push_back(concat_cols(outs));
  }
  auto attended = batch == 1 ? samples.front() : concat0(samples);
  return detail::projection(attended, w.wo, w.bo, adapter, layer, Role::Output);
}

template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& x, LayerWeights<T>& w, std::size_t layer,
                      const StageAdapter<T>* adapter, FfnForm form = FfnForm::HeadSum) {
  const std::size_t d = x.dim(1);
  if (adapter && adapter->factors.dim != d) {
    throw DimensionError("ffn: factor dimension " + std::to_string(adapter->factors.dim) +
                         " does not match hidden size " + std::to_string(d));
  }
  auto covered = [&](Role role, std::size_t block) {
    return adapter ? adapter->map.find(layer, role, block) : std::nullopt;
  };
  if (form == FfnForm::Monolithic) {
    auto pre = add_bias(matmul(x, w.w_up), w.b_up);
    std::vector<Tensor<T>> deltas;
    bool any = false;
    for (std::size_t i = 0; i < kFfnBlocks; ++i) {
      if (auto idx = covered(Role::Up, i)) {
        deltas.push_back(contract_forward(adapter->factors, *idx, x));
        any = true;
      } else {
        deltas.push_back(Tensor<T>::zeros({x.dim(0), d}));
      }
    }
    if (any) pre = add(pre, concat_cols(deltas));
    auto hidden = gelu(pre);
    auto out = add_bias(matmul(hidden, w.w_down), w.b_down);
    for (std::size_t i = 0; i < kFfnBlocks; ++i) {
      if (auto idx = covered(Role::Down, i)) {
        out = add(out, contract_forward(adapter->factors, *idx, slice_cols(hidden, i * d, (i + 1) * d)));
      }
    }
    return out;
  }
  Tensor<T> out;
  for (std::size_t i = 0; i < kFfnBlocks; ++i) {
    auto up = slice_cols(w.w_up, i * d, (i + 1) * d);
    auto up_b = slice0(w.b_up, i * d, (i + 1) * d);
    auto hidden = gelu(detail::projection(x, up, up_b, adapter, layer, Role::Up, i));
    auto term = matmul(hidden, slice0(w.w_down, i * d, (i + 1) * d));
    if (auto idx = covered(Role::Down, i)) term = add(term, contract_forward(adapter->factors, *idx, hidden));
    out = i == 0 ? term : add(out, term);
  }
  return add_bias(out, w.b_down);
}

// 2x2 merge of the grid tokens of every sample followed by norm+projection;
// the cls token goes through its own projection.
template <typename T>
Tensor<T> connect_stages(const Tensor<T>& x, Connector<T>& c, std::size_t batch, std::size_t grid) {
  const std::size_t tokens = 1 + grid * grid;
  const std::size_t half = grid / 2;
  std::vector<std::size_t> cls_rows, grid_rows;
  for (std::size_t b = 0; b < batch; ++b) {
    cls_rows.push_back(b * tokens);
    for (std::size_t gy = 0; gy < half; ++gy)
      for (std::size_t gx = 0; gx < half; ++gx)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            grid_rows.push_back(b * tokens + 1 + (2 * gy + dy) * grid + 2 * gx + dx);
  }
  const std::size_t d = x.dim(1);
  auto merged = reshape(gather_rows(x, std::move(grid_rows)), {batch * half * half, 4 * d});
  merged = matmul(layer_norm(merged, c.norm_g, c.norm_b), c.proj);
  auto cls = matmul(gather_rows(x, std::move(cls_rows)), c.cls_proj);
  // Interleave back to sample-major order.
  std::vector<std::size_t> order;
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(b);
    for (std::size_t t = 0; t < half * half; ++t) order.push_back(batch + b * half * half + t);
  }
  return gather_rows(concat0(std::vector<Tensor<T>>{cls, merged}), std::move(order));
}

// images: batch x C x H x W, row-major. Returns logits batch x classes.
// An empty adaptation runs the frozen backbone.
template <typename T>
Tensor<T> forward(Backbone<T>& model, std::span<const T> images, std::size_t batch,
                  std::span<const StageAdapter<T>> adaptation = {}, ForwardOptions options = {}) {
  const auto& c = model.config;
  const std::size_t image_numel = c.channels * c.image_size * c.image_size;
  if (images.size() != batch * image_numel) {
    throw DimensionError("forward: " + std::to_string(images.size()) + " pixels for batch " +
                         std::to_string(batch) + " of " + std::to_string(c.channels) + "x" +
                         std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  }
  if (!adaptation.empty() && adaptation.size() != model.stages.size()) {
    throw DimensionError("forward: adaptation has " + std::to_string(adaptation.size()) +
                         " stages, model has " + std::to_string(model.stages.size()));
  }
  const std::size_t g = c.grid();
  const std::size_t patches = g * g;
  auto emb = add_bias(matmul(detail::patchify(images, batch, c), model.patch_w), model.patch_b);

  // [cls_0..cls_{B-1}, patches...] reordered to sample-major with cls first.
  std::vector<std::size_t> order, pos_rows;
  for (std::size_t b = 0; b < batch; ++b) {
    order.push_back(b);
    pos_rows.push_back(0);
    for (std::size_t t = 0; t < patches; ++t) {
      order.push_back(batch + b * patches + t);
      pos_rows.push_back(t + 1);
    }
  }
  auto cls = gather_rows(model.cls, std::vector<std::size_t>(batch, 0));
  auto x = gather_rows(concat0(std::vector<Tensor<T>>{cls, emb}), std::move(order));
  x = add(x, gather_rows(model.pos, std::move(pos_rows)));

  std::size_t grid = g;
  for (std::size_t k = 0; k < model.stages.size(); ++k) {
    if (k > 0) {
      x = connect_stages(x, model.connectors[k - 1], batch, grid);
      grid /= 2;
    }
    const auto* adapter = detail::stage_adapter(adaptation, k);
    const std::size_t tokens = 1 + grid * grid;
    const std::size_t heads = c.stages[k].heads;
    for (std::size_t j = 0; j < model.stages[k].size(); ++j) {
      auto& w = model.stages[k][j];
      try {
        x = add(x, mhsa_forward(layer_norm(x, w.ln1_g, w.ln1_b), w, j, heads, batch, tokens, adapter));
        x = add(x, ffn_forward(layer_norm(x, w.ln2_g, w.ln2_b), w, j, adapter, options.ffn_form));
      } catch (const DimensionError& e) {
        throw DimensionError("stage " + std::to_string(k) + " layer " + std::to_string(j) + ": " + e.what());
      }
    }
  }
  std::vector<std::size_t> cls_rows;
  const std::size_t tokens = 1 + grid * grid;
  for (std::size_t b = 0; b < batch; ++b) cls_rows.push_back(b * tokens);
  auto pooled = layer_norm(gather_rows(x, std::move(cls_rows)), model.final_g, model.final_b);
  return add_bias(matmul(pooled, model.head_w), model.head_b);
}

}  // namespace fact
