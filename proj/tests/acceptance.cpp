// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance [--only N[,N...]]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fact/checkpoint.hpp"
#include "fact/data.hpp"
#include "fact/training.hpp"
#include "fact/vit.hpp"
#include "test_support.hpp"

using namespace fact;
using testing::check_gradients;
using testing::max_abs_diff;

namespace {

constexpr Format kFormats[] = {Format::TensorTrain, Format::Tucker, Format::MatrixBatch};

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string num(double v, int precision = 6) {
  std::ostringstream o;
  o.precision(precision);
  o << v;
  return o.str();
}

ViTConfig toy(std::size_t layers, std::size_t dim, std::size_t heads) {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 3;
  c.classes = 5;
  c.stages = {{layers, dim, heads}};
  return c;
}

template <typename T>
std::vector<T> random_images(const ViTConfig& c, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<T> px(batch * c.channels * c.image_size * c.image_size);
  for (auto& x : px) x = static_cast<T>(rng.uniform(-1, 1));
  return px;
}

template <typename T>
void fill_uniform(std::vector<Tensor<T>> tensors, Rng& rng, double amplitude) {
  for (auto& t : tensors)
    for (auto& x : t.data()) x = static_cast<T>(rng.uniform(-amplitude, amplitude));
}

// ---------------------------------------------------------------------------

Outcome param_counts() {
  Outcome o;
  const std::size_t tt = param_count(Format::TensorTrain, Strategy::All, 12, 768, 4);
  const std::size_t tk = param_count(Format::Tucker, Strategy::All, 12, 768, 8);
  const std::size_t mb = param_count(Format::MatrixBatch, Strategy::QueryValue, 12, 768, 8);
  ViTConfig base;
  base.image_size = 224;
  base.patch_size = 16;
  base.channels = 3;
  base.classes = 1000;
  base.stages = {{12, 768, 12}};
  const double dense = static_cast<double>(backbone_param_count(base, false));
  o.require(tt == 8448, "tt r=4 gave " + std::to_string(tt));
  o.require(tk == 13952, "tk r=8 gave " + std::to_string(tk));
  o.require(mb == 294912, "mb qv r=8 gave " + std::to_string(mb));
  o.require(std::abs(dense / 85.8e6 - 1.0) <= 0.02, "dense count " + num(dense, 9));
  o.detail = "tt=" + std::to_string(tt) + " tk=" + std::to_string(tk) + " mb=" + std::to_string(mb) +
             " dense=" + num(dense / 1e6, 4) + "M" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

Outcome partition_shapes() {
  Outcome o;
  const auto p = partition({{2, 128, 4}, {2, 256, 8}, {18, 512, 16}, {2, 1024, 32}}, Strategy::All);
  const std::vector<Shape> expected{{24, 128, 128}, {24, 256, 256}, {216, 512, 512}, {24, 1024, 1024}};
  std::string got;
  o.require(p.stages.size() == expected.size(), "stage count");
  for (std::size_t k = 0; k < p.stages.size() && k < expected.size(); ++k) {
    const auto s = p.stages[k].shape();
    got += (k ? " " : "") + std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
    o.require(s == expected[k], "stage " + std::to_string(k));
  }
  o.detail = got + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// Direct summation of the increment definitions.
double oracle_entry(const FactorSet<double>& f, std::size_t i, std::size_t j, std::size_t k) {
  const auto& r = f.ranks;
  double s = 0;
  switch (f.format) {
    case Format::MatrixBatch:
      for (std::size_t t = 0; t < r.r1; ++t) s += f.u.at(i, j, t) * f.v.at(i, t, k);
      break;
    case Format::TensorTrain:
      for (std::size_t a = 0; a < r.r1; ++a)
        for (std::size_t b = 0; b < r.r2; ++b) s += f.u.at(j, a) * f.sigma.at(i, a, b) * f.v.at(k, b);
      break;
    case Format::Tucker:
      for (std::size_t a = 0; a < r.r1; ++a)
        for (std::size_t b = 0; b < r.r2; ++b)
          for (std::size_t c = 0; c < r.r3; ++c)
            s += f.p.at(i, a) * f.u.at(j, b) * f.v.at(k, c) * f.core.at(a, b, c);
      break;
  }
  return f.scale * s;
}

Outcome expansion_oracle() {
  Outcome o;
  double worst_expand = 0, worst_contract = 0;
  std::size_t instances = 0;
  for (auto format : kFormats) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(derive_seed(seed, 31));
      const std::size_t m = 1 + rng.below(10), d = 2 + rng.below(11);
      const std::size_t r = 1 + rng.below(std::min<std::size_t>(4, d - 1));
      auto f = init_factors<double>(format, m, d, Ranks::uniform(format, r), rng.uniform(0.1, 3.0), seed);
      fill_uniform(f.parameters(), rng, 1.0);
      const auto dw = expand(f);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j)
          for (std::size_t k = 0; k < d; ++k)
            worst_expand = std::max(worst_expand, std::abs(dw.at(i, j, k) - oracle_entry(f, i, j, k)));
      const std::size_t rows = 1 + rng.below(6);
      auto x = Tensor<double>::zeros({rows, d});
      for (auto& v : x.data()) v = rng.uniform(-1, 1);
      for (std::size_t i = 0; i < m; ++i) {
        const auto y = contract_forward(f, i, x);
        for (std::size_t a = 0; a < rows; ++a)
          for (std::size_t k = 0; k < d; ++k) {
            double ref = 0, mag = 0;
            for (std::size_t j = 0; j < d; ++j) {
              ref += x.at(a, j) * dw.at(i, j, k);
              mag += std::abs(x.at(a, j) * dw.at(i, j, k));
            }
            worst_contract = std::max(worst_contract, std::abs(y.at(a, k) - ref) / std::max(mag, 1e-12));
          }
      }
      ++instances;
    }
  }
  o.require(worst_expand <= 1e-6, "expand error " + num(worst_expand));
  o.require(worst_contract <= 1e-5, "contract rel error " + num(worst_contract));
  o.detail = std::to_string(instances) + " instances, expand err " + num(worst_expand, 3) + ", contract rel err " +
             num(worst_contract, 3) + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

Outcome merge_equivalence() {
  Outcome o;
  const auto c = toy(2, 32, 4);
  const auto px = random_images<float>(c, 4, 2);
  double worst = 0;
  for (auto format : kFormats)
    for (auto strategy : {Strategy::All, Strategy::MhsaOnly, Strategy::FfnOnly}) {
      auto m = init_backbone<float>(c, 12);
      Rng rng(derive_seed(11, static_cast<std::uint64_t>(format) * 4 + static_cast<std::uint64_t>(strategy)));
      fill_uniform(m.head_parameters(), rng, 1.0);
      auto a = init_adaptation<float>(c, strategy, format, 4, 1.0f, 7);
      fill_uniform(adaptation_parameters(a), rng, 0.2);
      const auto factored = forward<float>(m, px, 4, a);
      merge_adaptation(m, a);
      const double diff = max_abs_diff(factored, forward<float>(m, px, 4));
      worst = std::max(worst, diff);
      o.require(diff <= 1e-4, std::string(format_name(format)) + "/" + std::string(strategy_name(strategy)) +
                                  " diff " + num(diff));
    }
  o.detail = "9 combinations, max |logit diff| " + num(worst, 3) + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

Outcome gradient_check() {
  Outcome o;
  const auto c = toy(2, 16, 2);
  const auto px = random_images<double>(c, 2, 6);
  const std::vector<int> labels{0, 3};
  std::string parts;
  for (auto format : kFormats) {
    auto m = init_backbone<double>(c, 16);
    Rng rng(derive_seed(14, static_cast<std::uint64_t>(format)));
    fill_uniform(m.head_parameters(), rng, 1.0);
    auto a = init_adaptation<double>(c, Strategy::All, format, 2, 1.0, 9);
    fill_uniform(adaptation_parameters(a), rng, 0.3);
    auto loss = [&] { return cross_entropy(forward<double>(m, px, 2, a), labels); };
    const auto r = check_gradients<double>(adaptation_parameters(a), loss, 1e-4, 120, 3);
    o.require(r.checked >= 100 && r.max_error <= 1e-2,
              std::string(format_name(format)) + " rel err " + num(r.max_error) + " over " + std::to_string(r.checked));
    parts += std::string(parts.empty() ? "" : ", ") + std::string(format_name(format)) + " " + num(r.max_error, 3) +
             " (" + std::to_string(r.checked) + ")";
  }
  o.detail = "max rel err " + parts + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

Outcome zero_init() {
  Outcome o;
  const auto c = toy(2, 16, 2);
  auto m = init_backbone<float>(c, 21);
  Rng rng(22);
  fill_uniform(m.head_parameters(), rng, 1.0);
  const auto px = random_images<float>(c, 6, 23);
  const auto frozen = forward<float>(m, px, 6);
  double worst = 0;
  for (auto format : kFormats)
    for (std::size_t rank : {1, 2, 4, 8})
      for (float s : {0.1f, 1.0f, 100.0f}) {
        auto a = init_adaptation<float>(c, Strategy::All, format, rank, s, rank * 7 + 1);
        worst = std::max(worst, max_abs_diff(forward<float>(m, px, 6, a), frozen));
      }
  o.require(worst <= 1e-6, "logit diff " + num(worst));

  // Epoch-0 validation loss of real training runs, against the linear probe.
  SyntheticSpec spec;
  spec.image_size = 8;
  spec.classes = 5;
  spec.train = 40;
  spec.val = 20;
  spec.test = 0;
  auto splits = generate_synthetic(spec);
  TrainConfig tc;
  tc.epochs = 1;
  tc.warmup_epochs = 0;
  tc.mode = TrainMode::LinearProbe;
  const double probe = train<float>(m, splits, tc).report.epochs.front().val_loss;
  double worst_loss = 0;
  for (auto format : kFormats)
    for (std::size_t rank : {1, 4}) {
      tc.mode = mode_for(format);
      tc.rank = rank;
      const double l = train<float>(m, splits, tc).report.epochs.front().val_loss;
      worst_loss = std::max(worst_loss, std::abs(l - probe));
    }
  o.require(worst_loss <= 1e-6, "step-0 loss diff " + num(worst_loss));
  o.detail = "36 factor sets, max |logit diff| " + num(worst, 3) + ", step-0 loss diff " + num(worst_loss, 3) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---------------------------------------------------------------------------
// Transfer experiment shared by the last two criteria.

struct Transfer {
  bool ran = false;
  std::string error;
  double linear = 0, tt1 = 0, tt4 = 0, tt16 = 0;
  std::uintmax_t checkpoint_bytes = 0, backbone_bytes = 0;
  double tt4_rerun = -1;
  bool tt4_bytes_equal = false;
  double seconds = 0;
};

Backbone<float> source_backbone;
DataSplits target;

TrainConfig finetune_config(TrainMode mode, std::size_t rank) {
  TrainConfig tc;
  tc.epochs = 20;
  tc.warmup_epochs = 2;
  tc.mode = mode;
  tc.rank = rank;
  tc.scale = 1.0;
  tc.seed = 5;
  return tc;
}

Transfer& transfer() {
  static Transfer t;
  if (t.ran) return t;
  t.ran = true;
  const auto started = std::chrono::steady_clock::now();
  try {
    SyntheticSpec src;
    src.seed = 11;
    src.task_seed = 1;
    src.train = 2000;
    src.val = 200;
    src.test = 0;
    auto source = generate_synthetic(src);
    SyntheticSpec tgt = src;
    tgt.seed = 12;
    tgt.task_seed = 2;
    tgt.train = 800;
    tgt.val = 200;
    tgt.test = 500;
    tgt.shift.rotation_deg = 30;
    tgt.shift.brightness = 0.1;
    target = generate_synthetic(tgt);
    for (auto* d : {&source.train, &source.val, &target.train, &target.val, &target.test}) normalize(*d, 0.5f, 0.5f);

    ViTConfig c;
    c.image_size = src.image_size;
    c.patch_size = 4;
    c.channels = src.channels;
    c.classes = src.classes;
    c.stages = {{4, 64, 4}};
    TrainConfig pre;
    pre.epochs = 15;
    pre.warmup_epochs = 1;
    pre.mode = TrainMode::FullFineTune;
    pre.seed = 3;
    source_backbone = train<float>(init_backbone<float>(c, 7), source, pre).model;
    std::cerr << "  pretrained backbone\n";

    auto run = [&](TrainMode mode, std::size_t rank) {
      auto res = train<float>(source_backbone, target, finetune_config(mode, rank));
      std::cerr << "  " << mode_name(mode) << " r=" << rank << " val " << res.report.final_val_accuracy << "\n";
      return res;
    };
    t.linear = run(TrainMode::LinearProbe, 0).report.final_val_accuracy;
    t.tt1 = run(TrainMode::FactorTT, 1).report.final_val_accuracy;
    const auto tt4 = run(TrainMode::FactorTT, 4);
    t.tt4 = tt4.report.final_val_accuracy;
    t.tt16 = run(TrainMode::FactorTT, 16).report.final_val_accuracy;

    const auto dir = std::filesystem::temp_directory_path() / ("fact_acceptance_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    save_checkpoint(tt4.checkpoint(Strategy::All), dir / "factors.bin");
    save_backbone(source_backbone, dir / "backbone.bin");
    t.checkpoint_bytes = std::filesystem::file_size(dir / "factors.bin");
    t.backbone_bytes = std::filesystem::file_size(dir / "backbone.bin");

    const auto again = run(TrainMode::FactorTT, 4);
    t.tt4_rerun = again.report.final_val_accuracy;
    t.tt4_bytes_equal = encode_checkpoint(again.checkpoint(Strategy::All)) ==
                        encode_checkpoint(tt4.checkpoint(Strategy::All));
    std::filesystem::remove_all(dir);
  } catch (const std::exception& e) {
    t.error = e.what();
  }
  t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return t;
}

Outcome transfer_experiment() {
  Outcome o;
  const auto& t = transfer();
  if (!t.error.empty()) {
    o.require(false, t.error);
    return o;
  }
  const double ratio = static_cast<double>(t.checkpoint_bytes) / static_cast<double>(t.backbone_bytes);
  o.require(t.tt4 >= t.linear + 0.05, "tt r=4 " + num(t.tt4) + " < linear " + num(t.linear) + " + 0.05");
  o.require(t.tt16 >= t.tt1 - 0.01, "tt r=16 " + num(t.tt16) + " < tt r=1 " + num(t.tt1) + " - 0.01");
  o.require(ratio < 0.01, "checkpoint ratio " + num(ratio));
  o.detail = "val linear=" + num(t.linear, 4) + " tt1=" + num(t.tt1, 4) + " tt4=" + num(t.tt4, 4) +
             " tt16=" + num(t.tt16, 4) + ", checkpoint " + std::to_string(t.checkpoint_bytes) + "B / backbone " +
             std::to_string(t.backbone_bytes) + "B = " + num(100 * ratio, 3) + "%" +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

Outcome determinism() {
  Outcome o;
  const auto& t = transfer();
  if (!t.error.empty()) {
    o.require(false, t.error);
    return o;
  }
  std::uint64_t a = 0, b = 0;
  std::memcpy(&a, &t.tt4, sizeof a);
  std::memcpy(&b, &t.tt4_rerun, sizeof b);
  o.require(a == b, "val accuracy " + num(t.tt4, 17) + " vs " + num(t.tt4_rerun, 17));
  o.require(t.tt4_bytes_equal, "checkpoint bytes differ");
  o.detail = "tt r=4 val " + num(t.tt4, 17) + " twice, checkpoints byte-identical=" +
             (t.tt4_bytes_equal ? "yes" : "no") + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream in(argv[++i]);
      std::string item;
      while (std::getline(in, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: acceptance [--only N[,N...]]\n";
      return 2;
    }
  }
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"parameter counts", param_counts},
      {"hierarchical partition shapes", partition_shapes},
      {"expansion oracle", expansion_oracle},
      {"merge equivalence", merge_equivalence},
      {"factor gradients", gradient_check},
      {"zero-init invariance", zero_init},
      {"desk-scale transfer", transfer_experiment},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto started = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::printf("%s %d %s: %s (%.2fs)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
