#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "fact/random.hpp"
#include "fact/tensor.hpp"

namespace fact::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<T> data(numel_of(shape));
  for (auto& x : data) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

// Reduces any output to a scalar through fixed random weights so every output
// entry contributes a distinct gradient.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor<T>(out.shape(), rng, false)));
}

inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_error = 0.0;
  std::size_t checked = 0;
};

// Central differences on every entry of every input (or on `samples` random
// entries when non-zero). `loss` must rebuild the graph from the inputs.
template <typename T>
GradCheck check_gradients(std::vector<Tensor<T>> inputs, const std::function<Tensor<T>()>& loss, double eps = 1e-3,
                          std::size_t samples = 0, std::uint64_t sample_seed = 0) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss());
  std::vector<std::vector<T>> analytic;
  for (auto& t : inputs) {
    if (!t.has_grad()) t.mutable_grad();
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) entries.emplace_back(k, i);
  if (samples > 0 && samples < entries.size()) {
    Rng rng(sample_seed);
    rng.shuffle(entries);
    entries.resize(samples);
  }
  GradCheck result;
  NoGradGuard no_grad;
  for (auto [k, i] : entries) {
    auto data = inputs[k].data();
    const T original = data[i];
    data[i] = original + static_cast<T>(eps);
    const double up = static_cast<double>(loss().item());
    data[i] = original - static_cast<T>(eps);
    const double down = static_cast<double>(loss().item());
    data[i] = original;
    const double numeric = (up - down) / (2.0 * eps);
    result.max_error = std::max(result.max_error, relative_error(static_cast<double>(analytic[k][i]), numeric));
    ++result.checked;
  }
  return result;
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  return max_abs_diff<T>(a.data(), b.data());
}

}  // namespace fact::testing
