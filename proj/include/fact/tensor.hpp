#pragma once

// Dense row-major tensors with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto a shared Node. Operations on tensors that
// require gradients record a backward closure on the result node; calling
// backward() on a scalar walks the recorded graph in reverse topological
// order. Leaves accumulate gradients across calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fact {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

// Graph recording is switched off inside a NoGradGuard scope (per thread).
struct GradMode {
  static bool& enabled() {
    thread_local bool flag = true;
    return flag;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const std::vector<T>&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T = float>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + fact::to_string(shape));
    }
    for (auto extent : shape) {
      if (extent == 0) throw DimensionError("zero extent in shape " + fact::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = T{1};
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = flag;
  }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + fact::to_string(shape()));
    return node_->data[0];
  }

  T& at(std::size_t i, std::size_t j) { return node_->data[i * dim(1) + j]; }
  T at(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return node_->data[(i * dim(1) + j) * dim(2) + k];
  }
  T at(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->data[(i * dim(1) + j) * dim(2) + k];
  }

  // New leaf holding a copy of the data; never part of a graph.
  Tensor clone() const {
    return Tensor(node_->shape, node_->data, node_->requires_grad && is_leaf());
  }
  Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

  Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Builds a result tensor and, if any parent needs gradients, attaches the
// backward closure. The closure receives d(loss)/d(result).
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      const std::vector<Tensor<T>>& parents,
                      std::function<void(const std::vector<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto* node = out.node();
  node->requires_grad = true;
  node->op = op;
  for (const auto& p : parents) node->parents.push_back(p.node_ptr());
  node->backward = std::move(backward);
  return out;
}

template <typename T>
void accumulate(const Tensor<T>& target, std::size_t offset, const T* src, std::size_t n) {
  if (!target.requires_grad()) return;
  auto& g = target.node()->grad_buffer();
  for (std::size_t i = 0; i < n; ++i) g[offset + i] += src[i];
}

template <typename T>
void accumulate(const Tensor<T>& target, const std::vector<T>& src) {
  accumulate(target, 0, src.data(), src.size());
}

// C (m x n) += op(A) * op(B), row-major.
// NN: A m x k, B k x n.  NT: A m x k, B n x k.  TN: A k x m, B k x n.
// Dot product with eight independent partial sums (fixed order, so results
// are deterministic, and the compiler can vectorize it).
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t p = 0;
  for (; p + 8 <= n; p += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[p + l] * b[p + l];
  T total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; p < n; ++p) total += a[p] * b[p];
  return total;
}

template <typename T>
struct SimdOf;
template <>
struct SimdOf<float> {
  typedef float type __attribute__((vector_size(32)));
};
template <>
struct SimdOf<double> {
  typedef double type __attribute__((vector_size(32)));
};

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (n < 16 && k >= 8) {
    // Narrow outputs: dot products against the rows of B^T.
    std::vector<T> bt(k * n);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, bt.data() + j * k, k);
    return;
  }
  // 4-row register tiles of two vectors each; leftovers take the axpy path.
  using V = typename SimdOf<T>::type;
  constexpr std::size_t L = 32 / sizeof(T), W = 2 * L, R = 4;
  std::size_t i = 0;
  for (; i + R <= m; i += R) {
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      V acc[R][2] = {};
      for (std::size_t p = 0; p < k; ++p) {
        V b0, b1;
        std::memcpy(&b0, b + p * n + j, sizeof(V));
        std::memcpy(&b1, b + p * n + j + L, sizeof(V));
        for (std::size_t r = 0; r < R; ++r) {
          const T av = a[(i + r) * k + p];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < R; ++r) {
        T* crow = c + (i + r) * n + j;
        for (std::size_t l = 0; l < L; ++l) {
          crow[l] += acc[r][0][l];
          crow[L + l] += acc[r][1][l];
        }
      }
    }
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[(i + r) * k + p];
        for (std::size_t jj = j; jj < n; ++jj) c[(i + r) * n + jj] += av * b[p * n + jj];
      }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
    }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  // Transposing B first turns the dot-product form into the vectorizable
  // axpy form of gemm_nn.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> at(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * m + i];
  gemm_nn(at.data(), b, c, m, k, n);
}

inline void require_ndim(const Shape& s, std::size_t n, const char* op) {
  if (s.size() != n) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(n) +
                         "-D tensor, got " + to_string(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a.shape(), 2, "matmul");
  detail::require_ndim(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) +
                         " * " + to_string(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>({m, n}, std::move(out), "matmul", {a, b},
                                [a, b, m, k, n](const std::vector<T>& g) {
                                  if (a.requires_grad()) {
                                    std::vector<T> da(m * k, T{0});
                                    detail::gemm_nt(g.data(), b.data().data(), da.data(), m, n, k);
                                    detail::accumulate(a, da);
                                  }
                                  if (b.requires_grad()) {
                                    std::vector<T> db(k * n, T{0});
                                    detail::gemm_tn(a.data().data(), g.data(), db.data(), k, m, n);
                                    detail::accumulate(b, db);
                                  }
                                });
}

// a * b^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_ndim(a.shape(), 2, "matmul_nt");
  detail::require_ndim(b.shape(), 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) +
                         " * " + to_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n, T{0});
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result<T>({m, n}, std::move(out), "matmul_nt", {a, b},
                                [a, b, m, k, n](const std::vector<T>& g) {
                                  if (a.requires_grad()) {
                                    std::vector<T> da(m * k, T{0});
                                    detail::gemm_nn(g.data(), b.data().data(), da.data(), m, n, k);
                                    detail::accumulate(a, da);
                                  }
                                  if (b.requires_grad()) {
                                    std::vector<T> db(n * k, T{0});
                                    detail::gemm_tn(g.data(), a.data().data(), db.data(), n, m, k);
                                    detail::accumulate(b, db);
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_ndim(a.shape(), 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  return detail::make_result<T>({n, m}, std::move(out), "transpose", {a},
                                [a, m, n](const std::vector<T>& g) {
                                  std::vector<T> da(m * n);
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[j * m + i];
                                  detail::accumulate(a, da);
                                });
}

// Mode-n product of a 3-D tensor with a matrix m[r x extent(mode)]; mode is
// 1-based. The contracted axis is replaced by an axis of length r.
template <typename T>
Tensor<T> mode_product(const Tensor<T>& t, const Tensor<T>& m, int mode) {
  detail::require_ndim(m.shape(), 2, "mode_product");
  if (t.ndim() != 3) {
    throw DimensionError("mode_product: expected 3-D tensor, got " + to_string(t.shape()));
  }
  if (mode < 1 || mode > 3) {
    throw std::out_of_range("mode_product: invalid mode " + std::to_string(mode) +
                            " for 3-D tensor (expected 1, 2 or 3)");
  }
  const std::size_t axis = static_cast<std::size_t>(mode - 1);
  const std::size_t extent = t.dim(axis);
  if (m.dim(1) != extent) {
    throw DimensionError("mode_product: matrix " + to_string(m.shape()) +
                         " does not match mode-" + std::to_string(mode) + " extent of " +
                         to_string(t.shape()));
  }
  const std::size_t r = m.dim(0);
  // View t as outer x extent x inner.
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  for (std::size_t i = axis + 1; i < 3; ++i) inner *= t.dim(i);
  Shape out_shape = t.shape();
  out_shape[axis] = r;
  std::vector<T> out(outer * r * inner, T{0});
  const auto td = t.data();
  const auto md = m.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < r; ++q) {
      T* dst = out.data() + (o * r + q) * inner;
      for (std::size_t e = 0; e < extent; ++e) {
        const T w = md[q * extent + e];
        const T* src = td.data() + (o * extent + e) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
      }
    }
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), "mode_product", {t, m},
      [t, m, outer, extent, inner, r](const std::vector<T>& g) {
        const auto td = t.data();
        const auto md = m.data();
        if (t.requires_grad()) {
          std::vector<T> dt(outer * extent * inner, T{0});
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t q = 0; q < r; ++q)
              for (std::size_t e = 0; e < extent; ++e) {
                const T w = md[q * extent + e];
                const T* src = g.data() + (o * r + q) * inner;
                T* dst = dt.data() + (o * extent + e) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
              }
          detail::accumulate(t, dt);
        }
        if (m.requires_grad()) {
          std::vector<T> dm(r * extent, T{0});
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t q = 0; q < r; ++q)
              for (std::size_t e = 0; e < extent; ++e) {
                const T* gs = g.data() + (o * r + q) * inner;
                const T* ts = td.data() + (o * extent + e) * inner;
                T acc{0};
                for (std::size_t i = 0; i < inner; ++i) acc += gs[i] * ts[i];
                dm[q * extent + e] += acc;
              }
          detail::accumulate(m, dm);
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ, " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b},
                                [a, b](const std::vector<T>& g) {
                                  detail::accumulate(a, g);
                                  detail::accumulate(b, g);
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shapes differ, " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b},
                                [a, b](const std::vector<T>& g) {
                                  detail::accumulate(a, g);
                                  if (b.requires_grad()) {
                                    std::vector<T> neg(g.size());
                                    for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                                    detail::accumulate(b, neg);
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  std::vector<T> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b},
                                [a, b](const std::vector<T>& g) {
                                  const auto x = a.data();
                                  const auto y = b.data();
                                  if (a.requires_grad()) {
                                    std::vector<T> da(g.size());
                                    for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * y[i];
                                    detail::accumulate(a, da);
                                  }
                                  if (b.requires_grad()) {
                                    std::vector<T> db(g.size());
                                    for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * x[i];
                                    detail::accumulate(b, db);
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a},
                                [a, factor](const std::vector<T>& g) {
                                  std::vector<T> da(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * factor;
                                  detail::accumulate(a, da);
                                });
}

// Adds a length-d vector to every row of an n x d matrix (explicit bias add;
// the library does no implicit broadcasting).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require_ndim(a.shape(), 2, "add_bias");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (bias.numel() != d) {
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " vs rows of " +
                         to_string(a.shape()));
  }
  std::vector<T> out(n * d);
  const auto x = a.data();
  const auto b = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] + b[j];
  return detail::make_result<T>(a.shape(), std::move(out), "add_bias", {a, bias},
                                [a, bias, n, d](const std::vector<T>& g) {
                                  detail::accumulate(a, g);
                                  if (bias.requires_grad()) {
                                    std::vector<T> db(d, T{0});
                                    for (std::size_t i = 0; i < n; ++i)
                                      for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
                                    detail::accumulate(bias, db);
                                  }
                                });
}

// Exact GELU, x * Phi(x) with Phi the standard normal CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(x[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return detail::make_result<T>(a.shape(), std::move(out), "gelu", {a},
                                [a](const std::vector<T>& g) {
                                  constexpr double inv_sqrt2pi = 0.39894228040143267794;
                                  const auto x = a.data();
                                  std::vector<T> da(g.size());
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const double v = static_cast<double>(x[i]);
                                    const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                                    const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                                    da[i] = static_cast<T>(static_cast<double>(g[i]) * (cdf + v * pdf));
                                  }
                                  detail::accumulate(a, da);
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " +
                         to_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {a},
                                [a](const std::vector<T>& g) { detail::accumulate(a, g); });
}

// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) {
    throw std::out_of_range("slice0: range [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") outside " + to_string(a.shape()));
  }
  const std::size_t stride = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
  return detail::make_result<T>(std::move(shape), std::move(out), "slice0", {a},
                                [a, begin, stride](const std::vector<T>& g) {
                                  detail::accumulate(a, begin * stride, g.data(), g.size());
                                });
}

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat0: no inputs");
  Shape shape = parts.front().shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != shape.size() ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      throw DimensionError("concat0: incompatible shapes " + to_string(shape) + " and " +
                           to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  shape[0] = rows;
  std::vector<T> out;
  out.reserve(numel_of(shape));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "concat0", parts,
                                [parts](const std::vector<T>& g) {
                                  std::size_t offset = 0;
                                  for (const auto& p : parts) {
                                    if (p.requires_grad()) {
                                      auto& pg = p.node()->grad_buffer();
                                      for (std::size_t i = 0; i < p.numel(); ++i) pg[i] += g[offset + i];
                                    }
                                    offset += p.numel();
                                  }
                                });
}

// Rows of a 2-D tensor picked by index (repeats allowed); backward
// scatter-adds into the source rows.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> rows) {
  detail::require_ndim(a.shape(), 2, "gather_rows");
  const std::size_t d = a.dim(1);
  std::vector<T> out(rows.size() * d);
  const auto x = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.dim(0)) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                              to_string(a.shape()));
    }
    std::copy_n(x.data() + rows[i] * d, d, out.data() + i * d);
  }
  const std::size_t n = rows.size();
  return detail::make_result<T>({n, d}, std::move(out), "gather_rows", {a},
                                [a, rows = std::move(rows), d](const std::vector<T>& g) {
                                  auto& ag = a.node()->grad_buffer();
                                  for (std::size_t i = 0; i < rows.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j) ag[rows[i] * d + j] += g[i * d + j];
                                });
}

// Columns [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_ndim(a.shape(), 2, "slice_cols");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (begin >= end || end > d) {
    throw std::out_of_range("slice_cols: range [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") outside " + to_string(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> out(n * w);
  const auto x = a.data();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.data() + i * d + begin, w, out.data() + i * w);
  return detail::make_result<T>({n, w}, std::move(out), "slice_cols", {a},
                                [a, n, d, w, begin](const std::vector<T>& g) {
                                  if (!a.requires_grad()) return;
                                  auto& ag = a.node()->grad_buffer();
                                  for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < w; ++j) ag[i * d + begin + j] += g[i * w + j];
                                });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts.front().dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    detail::require_ndim(p.shape(), 2, "concat_cols");
    if (p.dim(0) != n) {
      throw DimensionError("concat_cols: row counts differ, " + to_string(parts.front().shape()) +
                           " vs " + to_string(p.shape()));
    }
    width += p.dim(1);
  }
  std::vector<T> out(n * width);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    const auto x = p.data();
    for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data() + i * w, w, out.data() + i * width + col);
    col += w;
  }
  return detail::make_result<T>({n, width}, std::move(out), "concat_cols", parts,
                                [parts, n, width](const std::vector<T>& g) {
                                  std::size_t col = 0;
                                  for (const auto& p : parts) {
                                    const std::size_t w = p.dim(1);
                                    if (p.requires_grad()) {
                                      auto& pg = p.node()->grad_buffer();
                                      for (std::size_t i = 0; i < n; ++i)
                                        for (std::size_t j = 0; j < w; ++j) pg[i * w + j] += g[i * width + col + j];
                                    }
                                    col += w;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Normalization, reductions and losses

// Row-wise softmax with max subtraction. NaN inputs propagate to NaN outputs.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  detail::require_ndim(a.shape(), 2, "softmax_rows");
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<T> out(n * d);
  const auto x = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data() + i * d;
    T* dst = out.data() + i * d;
    T mx = row[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T total{0};
    for (std::size_t j = 0; j < d; ++j) {
      dst[j] = std::exp(row[j] - mx);
      total += dst[j];
    }
    for (std::size_t j = 0; j < d; ++j) dst[j] /= total;
  }
  auto result = detail::make_result<T>({n, d}, out, "softmax_rows", {a}, {});
  if (result.requires_grad()) {
    // Backward needs the output values; capture a copy rather than the node.
    result.node()->backward = [a, y = std::move(out), n, d](const std::vector<T>& g) {
      std::vector<T> da(n * d);
      for (std::size_t i = 0; i < n; ++i) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
        for (std::size_t j = 0; j < d; ++j) da[i * d + j] = y[i * d + j] * (g[i * d + j] - dot);
      }
      detail::accumulate(a, da);
    };
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
  detail::require_ndim(a.shape(), 2, "layer_norm");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters " + to_string(gamma.shape()) + "/" +
                         to_string(beta.shape()) + " vs " + to_string(a.shape()));
  }
  std::vector<T> xhat(n * d), out(n * d), inv_std(n);
  const auto x = a.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.data() + i * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gm[j] + bt[j];
    }
  }
  return detail::make_result<T>(
      {n, d}, std::move(out), "layer_norm", {a, gamma, beta},
      [a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
       d](const std::vector<T>& g) {
        const auto gm = gamma.data();
        if (a.requires_grad()) {
          std::vector<T> da(n * d);
          for (std::size_t i = 0; i < n; ++i) {
            T mean_g{0}, mean_gx{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = g[i * d + j] * gm[j];
              mean_g += gh;
              mean_gx += gh * xhat[i * d + j];
            }
            mean_g /= static_cast<T>(d);
            mean_gx /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = g[i * d + j] * gm[j];
              da[i * d + j] = inv_std[i] * (gh - mean_g - xhat[i * d + j] * mean_gx);
            }
          }
          detail::accumulate(a, da);
        }
        if (gamma.requires_grad() || beta.requires_grad()) {
          std::vector<T> dg(d, T{0}), db(d, T{0});
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += g[i * d + j] * xhat[i * d + j];
              db[j] += g[i * d + j];
            }
          detail::accumulate(gamma, dg);
          detail::accumulate(beta, db);
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T v : a.data()) total += v;
  return detail::make_result<T>({1}, {total}, "sum", {a}, [a](const std::vector<T>& g) {
    detail::accumulate(a, std::vector<T>(a.numel(), g[0]));
  });
}

// Mean over one axis; the axis is removed from the shape (a 1-D input yields
// shape [1]).
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.ndim()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " outside " +
                         to_string(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t extent = a.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  Shape shape;
  for (std::size_t i = 0; i < a.ndim(); ++i)
    if (i != axis) shape.push_back(a.dim(i));
  if (shape.empty()) shape.push_back(1);
  std::vector<T> out(outer * inner, T{0});
  const auto x = a.data();
  const T inv = T{1} / static_cast<T>(extent);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * extent + e) * inner + i];
  for (auto& v : out) v *= inv;
  return detail::make_result<T>(std::move(shape), std::move(out), "mean_axis", {a},
                                [a, outer, extent, inner, inv](const std::vector<T>& g) {
                                  std::vector<T> da(a.numel());
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t e = 0; e < extent; ++e)
                                      for (std::size_t i = 0; i < inner; ++i)
                                        da[(o * extent + e) * inner + i] = g[o * inner + i] * inv;
                                  detail::accumulate(a, da);
                                });
}

// Mean softmax cross-entropy of logits [B x C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_ndim(logits.shape(), 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         to_string(logits.shape()));
  }
  std::vector<T> prob(b * c);
  std::vector<int> lab(labels.begin(), labels.end());
  const auto x = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (lab[i] < 0 || static_cast<std::size_t>(lab[i]) >= c) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(lab[i]) +
                              " outside [0, " + std::to_string(c) + ")");
    }
    const T* row = x.data() + i * c;
    T mx = *std::max_element(row, row + c);
    T total{0};
    for (std::size_t j = 0; j < c; ++j) {
      prob[i * c + j] = std::exp(row[j] - mx);
      total += prob[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= total;
    loss -= static_cast<double>(row[lab[i]] - mx) - std::log(static_cast<double>(total));
  }
  loss /= static_cast<double>(b);
  return detail::make_result<T>(
      {1}, {static_cast<T>(loss)}, "cross_entropy", {logits},
      [logits, prob = std::move(prob), lab = std::move(lab), b, c](const std::vector<T>& g) {
        std::vector<T> dl(b * c);
        const T w = g[0] / static_cast<T>(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j)
            dl[i * c + j] = w * (prob[i * c + j] - (static_cast<int>(j) == lab[i] ? T{1} : T{0}));
        detail::accumulate(logits, dl);
      });
}

// ---------------------------------------------------------------------------
// Reverse sweep

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep; leaf gradients accumulate.
  for (auto* node : order)
    if (!node->is_leaf()) node->grad.assign(node->data.size(), T{0});
  loss.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->is_leaf()) node->backward(node->grad);
  }
}

}  // namespace fact
