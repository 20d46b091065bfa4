#pragma once

// Decompose-then-train fine-tuning: AdamW with warmup + cosine schedule over
// exactly the trainable set of the chosen mode, plus (rank, scale) sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fact/checkpoint.hpp"
#include "fact/data.hpp"
#include "fact/factorization.hpp"
#include "fact/random.hpp"
#include "fact/tensor.hpp"
#include "fact/vit.hpp"

namespace fact {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode { FactorTT, FactorTK, FactorMB, LinearProbe, FullFineTune };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::FactorTT: return "tt";
    case TrainMode::FactorTK: return "tk";
    case TrainMode::FactorMB: return "mb";
    case TrainMode::LinearProbe: return "linear";
    case TrainMode::FullFineTune: return "full";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view name) {
  if (name == "tt") return TrainMode::FactorTT;
  if (name == "tk") return TrainMode::FactorTK;
  if (name == "mb") return TrainMode::FactorMB;
  if (name == "linear") return TrainMode::LinearProbe;
  if (name == "full") return TrainMode::FullFineTune;
  throw ConfigError("unknown training mode '" + std::string(name) + "' (expected tt, tk, mb, linear or full)");
}

inline std::optional<Format> factor_format(TrainMode m) {
  switch (m) {
    case TrainMode::FactorTT: return Format::TensorTrain;
    case TrainMode::FactorTK: return Format::Tucker;
    case TrainMode::FactorMB: return Format::MatrixBatch;
    default: return std::nullopt;
  }
}

inline TrainMode mode_for(Format f) {
  switch (f) {
    case Format::TensorTrain: return TrainMode::FactorTT;
    case Format::Tucker: return TrainMode::FactorTK;
    case Format::MatrixBatch: return TrainMode::FactorMB;
  }
  return TrainMode::FactorTT;
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t warmup_epochs = 10;
  double scale = 1.0;
  std::size_t rank = 4;
  Strategy strategy = Strategy::All;
  TrainMode mode = TrainMode::FactorTT;
  std::vector<std::size_t> rank_candidates{1, 2, 4, 8, 16};
  std::vector<double> s_candidates{0.01, 0.1, 1, 10, 100};
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must not exceed epochs");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (!(scale > 0)) throw ConfigError("scale must be positive");
  }
};

// Batch 64 drops to 32 on datasets smaller than 640 samples.
inline std::size_t effective_batch_size(const TrainConfig& c, std::size_t samples) {
  if (c.batch_size == 64 && samples < 640) return 32;
  return c.batch_size;
}

// Linear warmup from 0 to lr, then cosine decay to 0 at epochs*steps_per_epoch.
inline double lr_at(const TrainConfig& c, std::size_t step, std::size_t steps_per_epoch) {
  const double warmup = static_cast<double>(c.warmup_epochs * steps_per_epoch);
  const double total = static_cast<double>(c.epochs * steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warmup) return c.lr * s / warmup;
  if (total <= warmup) return c.lr;
  const double progress = std::min(1.0, (s - warmup) / (total - warmup));
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One decoupled-decay AdamW update:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double weight_decay,
                AdamHyper h = {}) {
  if (params.size() != grads.size()) {
    throw DimensionError("adamw: " + std::to_string(params.size()) + " parameters vs " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  } else if (state.m.size() != params.size()) {
    throw DimensionError("adamw: optimizer state does not match parameter size");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    const double p = static_cast<double>(params[i]);
    params[i] = static_cast<T>(p - lr * (mhat / (std::sqrt(vhat) + h.eps) + weight_decay * p));
  }
}

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double weight_decay) : params_(std::move(params)), wd_(weight_decay) {
    states_.resize(params_.size());
  }

  // Parameters without a gradient are treated as having a zero gradient.
  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) p.mutable_grad();
      adamw_step<T>(p.data(), p.grad(), states_[i], lr, wd_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor<T>>& parameters() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<AdamState> states_;
  double wd_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

template <typename T>
EvalResult evaluate(Backbone<T>& model, std::span<const StageAdapter<T>> adaptation, const Dataset& data,
                    std::size_t batch_size = 128) {
  NoGradGuard no_grad;
  EvalResult r;
  r.samples = data.size();
  if (data.size() == 0) return r;
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<T> pixels;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    const std::size_t n = end - begin;
    const auto span = std::span<const float>(data.pixels).subspan(begin * data.image_numel(), n * data.image_numel());
    pixels.assign(span.begin(), span.end());
    auto logits = forward<T>(model, pixels, n, adaptation);
    const auto labels = std::span<const int>(data.labels).subspan(begin, n);
    loss += static_cast<double>(cross_entropy(logits, labels).item()) * static_cast<double>(n);
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = logits.data().subspan(i * c, c);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == labels[i] ? 1 : 0;
    }
  }
  r.loss = loss / static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before the first update
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainReport {
  TrainMode mode = TrainMode::FactorTT;
  Strategy strategy = Strategy::All;
  std::size_t rank = 0;
  double scale = 0.0;
  std::size_t batch_size = 0;
  std::vector<EpochRecord> epochs;
  double final_val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t test_samples = 0;
  std::size_t trainable_params = 0;  // counted from the live tensors
  std::size_t factor_params = 0;
  std::size_t head_params = 0;
  double wall_seconds = 0.0;
};

template <typename T = float>
struct TrainResult {
  TrainReport report;
  Backbone<T> model;  // dense weights used (a private copy) with the trained head
  Adaptation<T> adaptation;

  FactorCheckpoint<T> checkpoint(Strategy strategy) const {
    FactorCheckpoint<T> c;
    c.format = adaptation.empty() ? Format::TensorTrain : adaptation.front().factors.format;
    c.strategy = strategy;
    c.stages = adaptation;
    c.head_w = model.head_w;
    c.head_b = model.head_b;
    return c;
  }
};

// Trains on splits.train, validating on splits.val after every epoch.
// `backbone` is never modified.
template <typename T>
TrainResult<T> train(const Backbone<T>& backbone, const DataSplits& splits, const TrainConfig& config,
                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const Dataset& data = splits.train;
  if (data.size() == 0) throw DataError("training split is empty");
  if (data.channels != backbone.config.channels || data.image_size != backbone.config.image_size) {
    throw DataError("dataset geometry " + std::to_string(data.channels) + "x" + std::to_string(data.image_size) +
                    " does not match backbone " + std::to_string(backbone.config.channels) + "x" +
                    std::to_string(backbone.config.image_size));
  }
  const std::size_t classes = std::max({data.classes, splits.val.classes, splits.test.classes});

  TrainResult<T> result;
  result.model = backbone.clone();
  auto& model = result.model;
  model.set_requires_grad(false, true);
  model.reset_head(classes);
  model.head_w.set_requires_grad(true);
  model.head_b.set_requires_grad(true);

  std::vector<Tensor<T>> params = model.head_parameters();
  if (auto format = factor_format(config.mode)) {
    result.adaptation = init_adaptation<T>(model.config, config.strategy, *format, config.rank,
                                           static_cast<T>(config.scale), derive_seed(config.seed, 17));
    for (const auto& t : adaptation_parameters(result.adaptation)) params.push_back(t);
  } else if (config.mode == TrainMode::FullFineTune) {
    model.set_requires_grad(true, true);
    params = model.tensors(true);
  }

  auto& report = result.report;
  report.mode = config.mode;
  report.strategy = config.strategy;
  report.rank = factor_format(config.mode) ? config.rank : 0;
  report.scale = config.scale;
  for (const auto& p : params) report.trainable_params += p.numel();
  report.head_params = model.head_w.numel() + model.head_b.numel();
  report.factor_params = 0;
  for (const auto& s : result.adaptation) report.factor_params += s.factors.trainable_count();

  const std::size_t batch = std::min(effective_batch_size(config, data.size()), data.size());
  report.batch_size = batch;
  const std::size_t steps_per_epoch = (data.size() + batch - 1) / batch;
  AdamW<T> optimizer(params, config.weight_decay);

  auto validate = [&](EpochRecord& rec) {
    if (splits.val.size() == 0) return;
    const auto ev = evaluate<T>(model, result.adaptation, splits.val);
    rec.val_loss = ev.loss;
    rec.val_accuracy = ev.accuracy;
  };
  {
    EpochRecord rec;
    rec.epoch = 0;
    validate(rec);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  std::vector<std::size_t> order(data.size());
  std::vector<T> pixels;
  std::vector<int> labels;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, 1000 + epoch));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < data.size(); begin += batch) {
      const std::size_t end = std::min(data.size(), begin + batch);
      const std::size_t n = end - begin;
      pixels.clear();
      labels.clear();
      for (std::size_t i = begin; i < end; ++i) {
        const auto img = data.image(order[i]);
        pixels.insert(pixels.end(), img.begin(), img.end());
        labels.push_back(data.labels[order[i]]);
      }
      auto logits = forward<T>(model, pixels, n, result.adaptation);
      auto loss = cross_entropy(logits, std::span<const int>(labels));
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw DivergenceError("non-finite loss " + std::to_string(value) + " at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + " (lr " + std::to_string(config.lr) + ", s " +
                              std::to_string(config.scale) + ")");
      }
      loss_sum += value * static_cast<double>(n);
      backward(loss);
      optimizer.step(lr_at(config, step, steps_per_epoch));
      optimizer.zero_grad();
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(data.size());
    validate(rec);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  report.final_val_accuracy = report.epochs.back().val_accuracy;
  if (splits.test.size() > 0) {
    report.test_accuracy = evaluate<T>(model, result.adaptation, splits.test).accuracy;
    report.test_samples = splits.test.size();
  }
  model.set_requires_grad(false, true);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  std::size_t rank = 0;
  double scale = 0.0;
  double val_accuracy = 0.0;
  std::size_t params = 0;
  bool failed = false;
  std::string error;
};

template <typename T = float>
struct SweepResult {
  std::vector<SweepCell> cells;
  std::size_t best_rank = 0;
  double best_scale = 0.0;
  TrainResult<T> final;  // retrained on train+val with the winner
};

// Max val accuracy; ties go to fewer parameters, then smaller s.
inline std::size_t select_cell(const std::vector<SweepCell>& cells) {
  std::size_t best = cells.size();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (c.failed) continue;
    if (best == cells.size()) {
      best = i;
      continue;
    }
    const auto& b = cells[best];
    if (c.val_accuracy > b.val_accuracy ||
        (c.val_accuracy == b.val_accuracy &&
         (c.params < b.params || (c.params == b.params && c.scale < b.scale)))) {
      best = i;
    }
  }
  return best;
}

template <typename T>
SweepResult<T> sweep(const Backbone<T>& backbone, const DataSplits& splits, const TrainConfig& config,
                     std::ostream* log = nullptr) {
  if (config.rank_candidates.empty() || config.s_candidates.empty()) {
    throw ConfigError("sweep needs at least one rank and one scale candidate");
  }
  SweepResult<T> out;
  const bool factored = factor_format(config.mode).has_value();
  const std::vector<std::size_t> ranks = factored ? config.rank_candidates : std::vector<std::size_t>{0};
  const std::vector<double> scales = factored ? config.s_candidates : std::vector<double>{config.scale};
  std::size_t cell_index = 0;
  for (auto r : ranks) {
    for (auto s : scales) {
      TrainConfig cell = config;
      if (factored) cell.rank = r;
      cell.scale = s;
      cell.seed = derive_seed(config.seed, 50000 + cell_index++);
      SweepCell rec{r, s, 0.0, 0, false, {}};
      try {
        auto res = train<T>(backbone, DataSplits{splits.train, splits.val, {}}, cell);
        rec.val_accuracy = res.report.final_val_accuracy;
        rec.params = res.report.trainable_params;
      } catch (const std::exception& e) {
        rec.failed = true;
        rec.error = e.what();
        if (log) *log << "warning: sweep cell r=" << r << " s=" << s << " failed: " << e.what() << "\n";
      }
      out.cells.push_back(rec);
    }
  }
  const auto best = select_cell(out.cells);
  if (best == out.cells.size()) throw DivergenceError("every sweep cell failed");
  out.best_rank = out.cells[best].rank;
  out.best_scale = out.cells[best].scale;
  TrainConfig winner = config;
  if (factored) winner.rank = out.best_rank;
  winner.scale = out.best_scale;
  DataSplits merged{splits.train, {}, splits.test};
  merged.train.append(splits.val);
  out.final = train<T>(backbone, merged, winner);
  out.final.report.final_val_accuracy = out.cells[best].val_accuracy;
  return out;
}

// ---------------------------------------------------------------------------
// Metrics CSV: format,rank,scale,epoch,split,loss,acc,params,factor_params
// `params` counts every trainable scalar (head included); `factor_params`
// only the increment factors. The test row is written only when a test
// split was evaluated.

inline constexpr const char* kMetricsHeader = "format,rank,scale,epoch,split,loss,acc,params,factor_params";

inline void write_metrics(std::ostream& out, const TrainReport& r, bool header = true) {
  if (header) out << kMetricsHeader << "\n";
  const auto precision = out.precision(9);
  std::ostringstream head;
  head << std::setprecision(9) << mode_name(r.mode) << "," << r.rank << "," << r.scale << ",";
  const std::string prefix = head.str();
  const std::string counts = std::to_string(r.trainable_params) + "," + std::to_string(r.factor_params);
  for (const auto& e : r.epochs) {
    if (e.epoch > 0) out << prefix << e.epoch << ",train," << e.train_loss << ",," << counts << "\n";
    out << prefix << e.epoch << ",val," << e.val_loss << "," << e.val_accuracy << "," << counts << "\n";
  }
  if (r.test_samples > 0) {
    out << prefix << r.epochs.back().epoch << ",test,," << r.test_accuracy << "," << counts << "\n";
  }
  out.precision(precision);
}

}  // namespace fact
