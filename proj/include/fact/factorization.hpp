#pragma once

// Factorized weight increments over a stack of M square d x d slices.
//
//   MatrixBatch  dW_i = s * U_i V_i                  U: M x d x r,  V: M x r x d
//   TensorTrain  dW_i = s * U Sigma_i V^T            U: d x r1, V: d x r2, Sigma: M x r1 x r2
//   Tucker       dW_i = s * U (sum_t P_it C_t) V^T   P: M x r1, U: d x r2, V: d x r3, C: r1 x r2 x r3
//
// V is always zero-initialized so that a freshly initialized set expands to
// the zero tensor.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fact/random.hpp"
#include "fact/tensor.hpp"

namespace fact {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Format : std::uint8_t { MatrixBatch = 0, TensorTrain = 1, Tucker = 2 };

inline std::string_view format_name(Format f) {
  switch (f) {
    case Format::MatrixBatch: return "mb";
    case Format::TensorTrain: return "tt";
    case Format::Tucker: return "tk";
  }
  return "?";
}

inline Format parse_format(std::string_view name) {
  if (name == "mb") return Format::MatrixBatch;
  if (name == "tt") return Format::TensorTrain;
  if (name == "tk") return Format::Tucker;
  throw ConfigError("unknown factor format '" + std::string(name) + "' (expected tt, tk or mb)");
}

// Ranks per format: MB uses r1; TT uses r1, r2; Tucker uses r1 (slice mode),
// r2 and r3. Unused entries are zero.
struct Ranks {
  std::size_t r1 = 0;
  std::size_t r2 = 0;
  std::size_t r3 = 0;

  static Ranks uniform(Format format, std::size_t r) {
    switch (format) {
      case Format::MatrixBatch: return {r, 0, 0};
      case Format::TensorTrain: return {r, r, 0};
      case Format::Tucker: return {r, r, r};
    }
    return {};
  }

  bool operator==(const Ranks&) const = default;
};

inline void validate_ranks(Format format, std::size_t dim, const Ranks& ranks) {
  auto check = [dim](std::size_t r, const char* name) {
    if (r < 1 || r >= dim) {
      throw ConfigError(std::string("rank ") + name + "=" + std::to_string(r) +
                        " must satisfy 1 <= r < d=" + std::to_string(dim));
    }
  };
  check(ranks.r1, "r1");
  if (format != Format::MatrixBatch) check(ranks.r2, "r2");
  if (format == Format::Tucker) check(ranks.r3, "r3");
}

// Closed-form number of trainable factor entries.
inline std::size_t param_count(Format format, std::size_t slices, std::size_t dim, const Ranks& ranks) {
  switch (format) {
    case Format::MatrixBatch: return slices * 2 * dim * ranks.r1;
    case Format::TensorTrain: return dim * (ranks.r1 + ranks.r2) + slices * ranks.r1 * ranks.r2;
    case Format::Tucker:
      return dim * (ranks.r2 + ranks.r3) + slices * ranks.r1 + ranks.r1 * ranks.r2 * ranks.r3;
  }
  return 0;
}

template <typename T = float>
struct FactorSet {
  Format format = Format::TensorTrain;
  std::size_t slices = 0;  // M
  std::size_t dim = 0;     // d
  Ranks ranks;
  T scale = T{1};

  Tensor<T> u;
  Tensor<T> v;
  Tensor<T> sigma;  // TT only
  Tensor<T> p;      // Tucker only
  Tensor<T> core;   // Tucker only

  // Trainable tensors in canonical (checkpoint payload) order:
  // MB: U, V.  TT: U, V, Sigma.  Tucker: P, U, V, C.
  std::vector<Tensor<T>> parameters() const {
    switch (format) {
      case Format::MatrixBatch: return {u, v};
      case Format::TensorTrain: return {u, v, sigma};
      case Format::Tucker: return {p, u, v, core};
    }
    return {};
  }

  // Expected shapes of parameters(), in the same order.
  std::vector<Shape> parameter_shapes() const {
    const auto& r = ranks;
    switch (format) {
      case Format::MatrixBatch: return {{slices, dim, r.r1}, {slices, r.r1, dim}};
      case Format::TensorTrain: return {{dim, r.r1}, {dim, r.r2}, {slices, r.r1, r.r2}};
      case Format::Tucker: return {{slices, r.r1}, {dim, r.r2}, {dim, r.r3}, {r.r1, r.r2, r.r3}};
    }
    return {};
  }

  // Counted, not computed from the formula.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
  }

  void set_requires_grad(bool flag) {
    for (auto& t : parameters()) t.set_requires_grad(flag);
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }

  FactorSet clone() const {
    FactorSet copy = *this;
    auto fresh = [](const Tensor<T>& t) { return t.defined() ? t.clone() : t; };
    copy.u = fresh(u);
    copy.v = fresh(v);
    copy.sigma = fresh(sigma);
    copy.p = fresh(p);
    copy.core = fresh(core);
    return copy;
  }

  // Installs tensors in parameters() order (used by the checkpoint loader).
  void assign_parameters(std::vector<Tensor<T>> tensors) {
    const auto shapes = parameter_shapes();
    if (tensors.size() != shapes.size()) throw ConfigError("factor set: wrong number of tensors");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (tensors[i].shape() != shapes[i]) {
        throw DimensionError("factor set: tensor " + std::to_string(i) + " has shape " +
                             to_string(tensors[i].shape()) + ", expected " + to_string(shapes[i]));
      }
    }
    switch (format) {
      case Format::MatrixBatch: u = tensors[0]; v = tensors[1]; break;
      case Format::TensorTrain: u = tensors[0]; v = tensors[1]; sigma = tensors[2]; break;
      case Format::Tucker: p = tensors[0]; u = tensors[1]; v = tensors[2]; core = tensors[3]; break;
    }
  }
};

namespace detail {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(numel_of(shape));
  for (auto& x : data) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

}  // namespace detail

// V is zero; every other factor is uniform on [-1/sqrt(r), 1/sqrt(r)] with r
// the rank axis that factor contracts over. Draw order follows parameters().
template <typename T = float>
FactorSet<T> init_factors(Format format, std::size_t slices, std::size_t dim, Ranks ranks,
                          T scale, std::uint64_t seed) {
  if (slices < 1 || dim < 1) throw ConfigError("factor set needs M >= 1 and d >= 1");
  validate_ranks(format, dim, ranks);
  if (!(scale > T{0}) || !std::isfinite(static_cast<double>(scale))) {
    throw ConfigError("scale s must be a positive finite number");
  }
  FactorSet<T> f;
  f.format = format;
  f.slices = slices;
  f.dim = dim;
  f.ranks = ranks;
  f.scale = scale;
  Rng rng(seed);
  auto bound = [](std::size_t r) { return 1.0 / std::sqrt(static_cast<double>(r)); };
  const auto shapes = f.parameter_shapes();
  switch (format) {
    case Format::MatrixBatch:
      f.u = detail::uniform_tensor<T>(shapes[0], bound(ranks.r1), rng);
      f.v = Tensor<T>::zeros(shapes[1], true);
      break;
    case Format::TensorTrain:
      f.u = detail::uniform_tensor<T>(shapes[0], bound(ranks.r1), rng);
      f.v = Tensor<T>::zeros(shapes[1], true);
      f.sigma = detail::uniform_tensor<T>(shapes[2], bound(ranks.r1), rng);
      break;
    case Format::Tucker:
      f.p = detail::uniform_tensor<T>(shapes[0], bound(ranks.r1), rng);
      f.u = detail::uniform_tensor<T>(shapes[1], bound(ranks.r2), rng);
      f.v = Tensor<T>::zeros(shapes[2], true);
      f.core = detail::uniform_tensor<T>(shapes[3], bound(ranks.r1), rng);
      break;
  }
  return f;
}

template <typename T = float>
FactorSet<T> init_factors(Format format, std::size_t slices, std::size_t dim, std::size_t rank,
                          T scale, std::uint64_t seed) {
  return init_factors<T>(format, slices, dim, Ranks::uniform(format, rank), scale, seed);
}

// Materializes the full M x d x d increment. Differentiable w.r.t. factors.
template <typename T>
Tensor<T> expand(const FactorSet<T>& f) {
  switch (f.format) {
    case Format::MatrixBatch: {
      std::vector<Tensor<T>> slices;
      slices.reserve(f.slices);
      const std::size_t r = f.ranks.r1;
      for (std::size_t i = 0; i < f.slices; ++i) {
        auto ui = reshape(slice0(f.u, i, i + 1), {f.dim, r});
        auto vi = reshape(slice0(f.v, i, i + 1), {r, f.dim});
        slices.push_back(reshape(matmul(ui, vi), {1, f.dim, f.dim}));
      }
      return scale(concat0(slices), f.scale);
    }
    case Format::TensorTrain:
      return scale(mode_product(mode_product(f.sigma, f.u, 2), f.v, 3), f.scale);
    case Format::Tucker:
      return scale(mode_product(mode_product(mode_product(f.core, f.p, 1), f.u, 2), f.v, 3),
                   f.scale);
  }
  throw ConfigError("expand: unknown format");
}

// Per-slice Tucker core G_i = sum_t P[i, t] C[t, :, :], shape r2 x r3.
template <typename T>
Tensor<T> tucker_slice_core(const FactorSet<T>& f, std::size_t index) {
  const auto& r = f.ranks;
  auto weights = slice0(f.p, index, index + 1);  // 1 x r1
  return reshape(matmul(weights, reshape(f.core, {r.r1, r.r2 * r.r3})), {r.r2, r.r3});
}

// s * X * dW_index, contracted left to right from X so intermediates are N x r.
template <typename T>
Tensor<T> contract_forward(const FactorSet<T>& f, std::size_t index, const Tensor<T>& x) {
  if (index >= f.slices) {
    throw std::out_of_range("contract_forward: slice " + std::to_string(index) + " outside [0, " +
                            std::to_string(f.slices) + ")");
  }
  if (x.ndim() != 2 || x.dim(1) != f.dim) {
    throw DimensionError("contract_forward: input " + to_string(x.shape()) +
                         " does not match slice dimension " + std::to_string(f.dim));
  }
  switch (f.format) {
    case Format::MatrixBatch: {
      const std::size_t r = f.ranks.r1;
      auto ui = reshape(slice0(f.u, index, index + 1), {f.dim, r});
      auto vi = reshape(slice0(f.v, index, index + 1), {r, f.dim});
      return scale(matmul(matmul(x, ui), vi), f.scale);
    }
    case Format::TensorTrain: {
      auto core = reshape(slice0(f.sigma, index, index + 1), {f.ranks.r1, f.ranks.r2});
      return scale(matmul_nt(matmul(matmul(x, f.u), core), f.v), f.scale);
    }
    case Format::Tucker: {
      auto core = tucker_slice_core(f, index);
      return scale(matmul_nt(matmul(matmul(x, f.u), core), f.v), f.scale);
    }
  }
  throw ConfigError("contract_forward: unknown format");
}

// weights[i] += dW_i for every slice; the factor set is not modified.
template <typename T>
void merge_into(const FactorSet<T>& f, std::span<Tensor<T>> weights) {
  if (weights.size() != f.slices) {
    throw DimensionError("merge_into: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(f.slices) + " slices");
  }
  NoGradGuard no_grad;
  const auto delta = expand(f);
  const std::size_t block = f.dim * f.dim;
  for (std::size_t i = 0; i < f.slices; ++i) {
    if (weights[i].shape() != Shape{f.dim, f.dim}) {
      throw DimensionError("merge_into: weight " + std::to_string(i) + " has shape " +
                           to_string(weights[i].shape()));
    }
    auto w = weights[i].data();
    const auto dw = delta.data().subspan(i * block, block);
    for (std::size_t j = 0; j < block; ++j) w[j] += dw[j];
  }
}

}  // namespace fact
