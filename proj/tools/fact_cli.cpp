// fact: command-line driver for pretraining, factor fine-tuning, merging and
// reporting.
//
//   fact <command> [--config FILE] [flags]
//
// Exit codes: 0 ok, 1 internal, 2 config, 3 data, 4 divergence. Failures print
// exactly one stderr line starting with "error: <kind>: ".

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fact/checkpoint.hpp"
#include "fact/data.hpp"
#include "fact/training.hpp"
#include "fact/vit.hpp"

namespace fs = std::filesystem;

namespace {

using fact::ConfigError;
using fact::DataError;

constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

constexpr const char* kSourceData = "synthetic:seed=11,task=1,train=2000,val=200,test=0";
constexpr const char* kTargetData = "synthetic:seed=12,task=2,train=800,val=200,test=500,rotation=30,brightness=0.1";

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  std::istringstream in(trim(text));
  T v{};
  in >> v;
  if (!in || !in.eof()) throw ConfigError(what + ": cannot parse '" + text + "' as a number");
  if constexpr (std::is_unsigned_v<T>) {
    if (trim(text).starts_with("-")) throw ConfigError(what + ": '" + text + "' must be non-negative");
  }
  return v;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  for (const auto& item : split(text, ',')) out.push_back(parse_number<T>(item, what));
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

// "LxDxH,LxDxH,..." stage list.
std::vector<fact::StageSpec> parse_stages(const std::string& text) {
  std::vector<fact::StageSpec> out;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(item, 'x');
    if (parts.size() != 3) throw ConfigError("stages: expected LxDxH, got '" + item + "'");
    out.push_back({parse_number<std::size_t>(parts[0], "stages"), parse_number<std::size_t>(parts[1], "stages"),
                   parse_number<std::size_t>(parts[2], "stages")});
  }
  if (out.empty()) throw ConfigError("stages: empty list");
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream o;
  o << std::setprecision(9) << v;
  return o.str();
}

// ---------------------------------------------------------------------------
// Data specs
//   synthetic[:key=value,...]   seeded blob images
//   dir:PATH                    PATH/{train,val,test} binary image dirs

fact::DataSplits load_data(const std::string& spec, float mean, float stddev) {
  fact::DataSplits splits;
  if (spec.starts_with("dir:")) {
    const fs::path root = spec.substr(4);
    if (!fs::is_directory(root)) throw DataError("data directory not found: " + root.string());
    splits.train = fact::load_binary_images(root / "train");
    if (fs::exists(root / "val")) splits.val = fact::load_binary_images(root / "val");
    if (fs::exists(root / "test")) splits.test = fact::load_binary_images(root / "test");
  } else if (spec == "synthetic" || spec.starts_with("synthetic:")) {
    fact::SyntheticSpec s;
    const std::string args = spec.size() > 10 ? spec.substr(10) : "";
    for (const auto& kv : split(args, ',')) {
      if (trim(kv).empty()) continue;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("data: expected key=value, got '" + kv + "'");
      const std::string key = trim(kv.substr(0, eq)), value = kv.substr(eq + 1), what = "data." + key;
      if (key == "seed") s.seed = parse_number<std::uint64_t>(value, what);
      else if (key == "task") s.task_seed = parse_number<std::uint64_t>(value, what);
      else if (key == "classes") s.classes = parse_number<std::size_t>(value, what);
      else if (key == "size") s.image_size = parse_number<std::size_t>(value, what);
      else if (key == "channels") s.channels = parse_number<std::size_t>(value, what);
      else if (key == "blobs") s.blobs = parse_number<std::size_t>(value, what);
      else if (key == "noise") s.noise = parse_number<double>(value, what);
      else if (key == "jitter") s.jitter = parse_number<double>(value, what);
      else if (key == "rotation") s.shift.rotation_deg = parse_number<double>(value, what);
      else if (key == "brightness") s.shift.brightness = parse_number<double>(value, what);
      else if (key == "train") s.train = parse_number<std::size_t>(value, what);
      else if (key == "val") s.val = parse_number<std::size_t>(value, what);
      else if (key == "test") s.test = parse_number<std::size_t>(value, what);
      else throw ConfigError("data: unknown synthetic key '" + key + "'");
    }
    if (s.classes < 2) throw ConfigError("data.classes must be >= 2");
    if (s.image_size == 0 || s.channels == 0) throw ConfigError("data.size and data.channels must be positive");
    splits = fact::generate_synthetic(s);
  } else {
    throw ConfigError("data: unknown spec '" + spec + "' (expected synthetic[:k=v,...] or dir:PATH)");
  }
  if (!(stddev > 0)) throw ConfigError("norm_std must be positive");
  for (auto* d : {&splits.train, &splits.val, &splits.test})
    if (d->size() > 0) fact::normalize(*d, mean, stddev);
  return splits;
}

const fact::Dataset& pick_split(const fact::DataSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("split must be train, val or test, got '" + name + "'");
}

// ---------------------------------------------------------------------------
// Option registry: every flag is also a config-file key, and the resolved
// values are echoed in registration order.

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, std::function<std::string()>>> echo;

  template <typename T>
  CLI::Option* add(const std::string& flags, const std::string& key, T& var, const std::string& help) {
    echo.emplace_back(key, [&var] {
      if constexpr (std::is_same_v<T, std::string>) return var;
      else if constexpr (std::is_same_v<T, bool>) return std::string(var ? "true" : "false");
      else if constexpr (std::is_floating_point_v<T>) return fmt_double(var);
      else return std::to_string(var);
    });
    return app->add_option(flags, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& flags, const std::string& key, bool& var, const std::string& help) {
    echo.emplace_back(key, [&var] { return std::string(var ? "true" : "false"); });
    return app->add_flag(flags, var, help);
  }

  std::string resolved() const {
    std::string out;
    for (const auto& [k, f] : echo) out += k + "=" + f() + "\n";
    return out;
  }

  void print_resolved() const {
    std::cerr << "# " << app->get_name() << " resolved config\n" << resolved() << std::flush;
  }
};

struct DataFlags {
  std::string data;
  float mean = 0.5f;
  float stddev = 0.5f;

  void add(Command& c, const std::string& default_spec) {
    data = default_spec;
    c.add("--data", "data", data, "synthetic[:key=value,...] or dir:PATH");
    c.add("--norm-mean", "norm-mean", mean, "per-channel normalization mean");
    c.add("--norm-std", "norm-std", stddev, "per-channel normalization std");
  }

  fact::DataSplits load() const { return load_data(data, mean, stddev); }
};

struct TrainFlags {
  fact::TrainConfig cfg;
  std::string format = "tt";
  std::string strategy = "all";
  std::size_t seed = 0;

  void add(Command& c, bool factored) {
    if (factored) {
      c.add("--format", "format", format, "tt, tk, mb, linear or full");
      c.add("--strategy", "strategy", strategy, "all, mhsa, ffn or qv");
      c.add("--rank", "rank", cfg.rank, "factor rank");
      c.add("--scale", "scale", cfg.scale, "increment scale s");
    }
    c.add("--epochs", "epochs", cfg.epochs, "training epochs");
    c.add("--batch", "batch", cfg.batch_size, "batch size (64 drops to 32 below 640 samples)");
    c.add("--lr", "lr", cfg.lr, "peak learning rate");
    c.add("--weight-decay", "weight-decay", cfg.weight_decay, "AdamW weight decay");
    c.add("--warmup", "warmup", cfg.warmup_epochs, "linear warmup epochs");
    c.add("--seed", "seed", seed, "run seed");
  }

  fact::TrainConfig resolve() const {
    auto c = cfg;
    c.mode = fact::parse_mode(format);
    c.strategy = fact::parse_strategy(strategy);
    c.seed = seed;
    c.validate();
    return c;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write to " + path.string());
}

void check_geometry(const fact::Backbone<float>& model, const fact::Dataset& data) {
  if (data.channels != model.config.channels || data.image_size != model.config.image_size) {
    throw DataError("dataset geometry " + std::to_string(data.channels) + "x" + std::to_string(data.image_size) +
                    " does not match backbone " + std::to_string(model.config.channels) + "x" +
                    std::to_string(model.config.image_size));
  }
}

void install_head(fact::Backbone<float>& model, const fact::FactorCheckpoint<float>& ckpt) {
  if (ckpt.head_w.shape().size() != 2 || ckpt.head_w.dim(0) != model.config.final_dim()) {
    throw fact::DimensionError("checkpoint head expects width " + std::to_string(ckpt.head_w.dim(0)) +
                               ", backbone has " + std::to_string(model.config.final_dim()));
  }
  model.head_w = ckpt.head_w;
  model.head_b = ckpt.head_b;
  model.config.classes = ckpt.classes();
}

void print_report(const fact::TrainReport& r) {
  std::cout << "format=" << fact::mode_name(r.mode) << " strategy=" << fact::strategy_name(r.strategy)
            << " rank=" << r.rank << " scale=" << fmt_double(r.scale) << " trainable_params=" << r.trainable_params
            << " factor_params=" << r.factor_params << " head_params=" << r.head_params
            << " val_acc=" << fmt_double(r.final_val_accuracy);
  if (r.test_samples > 0) std::cout << " test_acc=" << fmt_double(r.test_accuracy);
  std::cout << "\n";
}

// Writes factors.bin (or model.bin for dense modes), metrics.csv and config.ini.
void write_run(const fs::path& dir, const fact::TrainResult<float>& res, const fact::TrainConfig& cfg,
               const Command& cmd) {
  fs::create_directories(dir);
  if (cfg.mode == fact::TrainMode::FullFineTune) {
    auto model = res.model;
    fact::save_backbone(model, dir / "model.bin");
  } else {
    fact::save_checkpoint(res.checkpoint(cfg.strategy), dir / "factors.bin");
  }
  std::ostringstream metrics;
  fact::write_metrics(metrics, res.report);
  write_text(dir / "metrics.csv", metrics.str());
  write_text(dir / "config.ini", cmd.resolved());
}

// ---------------------------------------------------------------------------
// Commands

struct Pretrain {
  Command cmd;
  DataFlags data;
  TrainFlags train;
  std::string stages = "4x64x4";
  std::size_t patch = 4;
  std::size_t init_seed = 7;
  std::string out;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("pretrain", "train a dense backbone on a source task");
    data.add(cmd, kSourceData);
    cmd.add("--stages", "stages", stages, "LxDxH per stage, comma separated");
    cmd.add("--patch", "patch", patch, "patch size");
    cmd.add("--init-seed", "init-seed", init_seed, "weight initialization seed");
    train.cfg.epochs = 15;
    train.cfg.warmup_epochs = 1;
    train.add(cmd, false);
    cmd.add("--out", "out", out, "output directory (model.bin, metrics.csv)")->required();
  }

  int run() {
    cmd.print_resolved();
    fact::ViTConfig config;
    config.stages = parse_stages(stages);
    config.patch_size = patch;
    auto tc = train.resolve();
    tc.mode = fact::TrainMode::FullFineTune;
    const auto splits = data.load();
    config.image_size = splits.train.image_size;
    config.channels = splits.train.channels;
    config.classes = std::max(splits.train.classes, std::size_t{1});
    config.validate();
    const auto backbone = fact::init_backbone<float>(config, init_seed);
    auto res = fact::train<float>(backbone, splits, tc,
                                  [](const fact::EpochRecord& e) {
                                    std::cerr << "epoch " << e.epoch << " train_loss " << e.train_loss
                                              << " val_acc " << e.val_accuracy << "\n";
                                  });
    write_run(out, res, tc, cmd);
    std::cout << "backbone_params=" << res.model.dense_count(true) << " val_acc="
              << fmt_double(res.report.final_val_accuracy) << "\n";
    return 0;
  }
};

struct Train {
  Command cmd;
  DataFlags data;
  TrainFlags train;
  std::string backbone;
  std::string out;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("train", "fine-tune factors (or a baseline) on a target task");
    cmd.add("--backbone", "backbone", backbone, "backbone container")->required();
    data.add(cmd, kTargetData);
    train.add(cmd, true);
    cmd.add("--out", "out", out, "output directory (factors.bin, metrics.csv)")->required();
  }

  int run() {
    cmd.print_resolved();
    const auto tc = train.resolve();
    const auto model = fact::load_backbone<float>(backbone);
    const auto splits = data.load();
    auto res = fact::train<float>(model, splits, tc, [](const fact::EpochRecord& e) {
      std::cerr << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_acc " << e.val_accuracy << "\n";
    });
    write_run(out, res, tc, cmd);
    print_report(res.report);
    return 0;
  }
};

struct Sweep {
  Command cmd;
  DataFlags data;
  TrainFlags train;
  std::string backbone;
  std::string ranks = "1,2,4,8,16";
  std::string scales = "0.01,0.1,1,10,100";
  std::string out;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("sweep", "grid search rank x scale on val, retrain the winner on train+val");
    cmd.add("--backbone", "backbone", backbone, "backbone container")->required();
    data.add(cmd, kTargetData);
    train.add(cmd, true);
    cmd.add("--ranks", "ranks", ranks, "rank candidates");
    cmd.add("--scales", "scales", scales, "scale candidates");
    cmd.add("--out", "out", out, "output directory (sweep.csv, factors.bin, metrics.csv)")->required();
  }

  int run() {
    cmd.print_resolved();
    auto tc = train.resolve();
    tc.rank_candidates = parse_list<std::size_t>(ranks, "ranks");
    tc.s_candidates = parse_list<double>(scales, "scales");
    const auto model = fact::load_backbone<float>(backbone);
    const auto splits = data.load();
    auto res = fact::sweep<float>(model, splits, tc, &std::cerr);
    std::ostringstream grid;
    grid << "rank,scale,val_acc,params,status\n";
    for (const auto& c : res.cells) {
      grid << c.rank << "," << fmt_double(c.scale) << "," << fmt_double(c.val_accuracy) << "," << c.params << ","
           << (c.failed ? "failed" : "ok") << "\n";
    }
    auto winner = tc;
    winner.rank = res.best_rank;
    winner.scale = res.best_scale;
    write_run(out, res.final, winner, cmd);
    write_text(fs::path(out) / "sweep.csv", grid.str());
    std::cout << "best_rank=" << res.best_rank << " best_scale=" << fmt_double(res.best_scale) << "\n";
    print_report(res.final.report);
    return 0;
  }
};

struct Eval {
  Command cmd;
  DataFlags data;
  std::string backbone;
  std::string factors;
  std::string split = "test";
  std::size_t batch = 128;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("eval", "accuracy of a backbone (plus optional factors) on one split");
    cmd.add("--backbone", "backbone", backbone, "backbone container")->required();
    cmd.add("--factors", "factors", factors, "factor checkpoint (its head replaces the backbone head)");
    data.add(cmd, kTargetData);
    cmd.add("--split", "split", split, "train, val or test");
    cmd.add("--batch", "batch", batch, "evaluation batch size");
  }

  int run() {
    cmd.print_resolved();
    if (batch == 0) throw ConfigError("batch must be >= 1");
    auto model = fact::load_backbone<float>(backbone);
    fact::Adaptation<float> adaptation;
    if (!factors.empty()) {
      auto ckpt = fact::load_checkpoint<float>(factors);
      install_head(model, ckpt);
      adaptation = std::move(ckpt.stages);
    }
    const auto splits = data.load();
    const auto& d = pick_split(splits, split);
    if (d.size() == 0) throw DataError("split '" + split + "' is empty");
    check_geometry(model, d);
    if (d.classes > model.config.classes) {
      throw DataError("data has " + std::to_string(d.classes) + " classes, head has " +
                      std::to_string(model.config.classes));
    }
    const auto r = fact::evaluate<float>(model, adaptation, d, batch);
    std::cout << "split=" << split << " samples=" << r.samples << " loss=" << fmt_double(r.loss)
              << " acc=" << fmt_double(r.accuracy) << "\n";
    return 0;
  }
};

struct Merge {
  Command cmd;
  std::string backbone;
  std::string factors;
  std::string out;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("merge", "absorb factor increments and head into a dense backbone");
    cmd.add("--backbone", "backbone", backbone, "backbone container")->required();
    cmd.add("--factors", "factors", factors, "factor checkpoint")->required();
    cmd.add("--out", "out", out, "merged backbone container")->required();
  }

  int run() {
    cmd.print_resolved();
    auto model = fact::load_backbone<float>(backbone);
    const auto ckpt = fact::load_checkpoint<float>(factors);
    install_head(model, ckpt);
    if (!ckpt.stages.empty()) fact::merge_adaptation(model, ckpt.stages);
    fact::save_backbone(model, out);
    std::cout << "merged " << ckpt.stages.size() << " stage(s) into " << out << "\n";
    return 0;
  }
};

struct CountParams {
  Command cmd;
  std::string formats = "tt,tk,mb";
  std::string ranks = "1,2,4,8,16";
  std::string strategy = "all";
  std::size_t layers = 12;
  std::size_t dim = 768;
  std::string stages;
  bool csv = false;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("count-params", "trainable factor counts per format and rank");
    cmd.add("--format", "format", formats, "formats (tt, tk, mb), comma separated");
    cmd.add("--rank,--ranks", "rank", ranks, "ranks, comma separated");
    cmd.add("--strategy", "strategy", strategy, "all, mhsa, ffn or qv");
    cmd.add("-L,--layers", "layers", layers, "layers of a plain model");
    cmd.add("-d,--dim", "dim", dim, "width of a plain model");
    cmd.add("--stages", "stages", stages, "LxDxH per stage; overrides -L/-d");
    cmd.flag("--csv", "csv", csv, "machine-readable CSV");
  }

  int run() {
    cmd.print_resolved();
    const auto strat = fact::parse_strategy(strategy);
    std::vector<fact::Format> fs_;
    for (const auto& f : split(formats, ',')) fs_.push_back(fact::parse_format(trim(f)));
    if (fs_.empty()) throw ConfigError("format: empty list");
    const auto rs = parse_list<std::size_t>(ranks, "rank");
    std::vector<fact::StageSpec> spec = stages.empty() ? std::vector<fact::StageSpec>{{layers, dim, 1}}
                                                       : parse_stages(stages);
    const auto part = fact::partition(spec, strat);
    const bool staged = !stages.empty();

    struct Row {
      std::string format, stage, shape;
      std::size_t rank = 0, params = 0;
    };
    std::vector<Row> rows;
    for (auto f : fs_) {
      for (auto r : rs) {
        const auto ranks_ = fact::Ranks::uniform(f, r);
        std::size_t total = 0;
        for (std::size_t k = 0; k < part.stages.size(); ++k) {
          const auto& s = part.stages[k];
          fact::validate_ranks(f, s.dim, ranks_);
          const auto n = fact::param_count(f, s.slices, s.dim, ranks_);
          total += n;
          const std::string shape = std::to_string(s.slices) + "x" + std::to_string(s.dim) + "x" + std::to_string(s.dim);
          if (staged) rows.push_back({std::string(fact::format_name(f)), std::to_string(k), shape, r, n});
          else rows.push_back({std::string(fact::format_name(f)), "all", shape, r, n});
        }
        if (staged) rows.push_back({std::string(fact::format_name(f)), "total", "", r, total});
      }
    }
    auto millions = [](std::size_t n) {
      std::ostringstream o;
      o << std::fixed << std::setprecision(3) << static_cast<double>(n) / 1e6;
      return o.str();
    };
    if (csv) {
      std::cout << "format,strategy,stage,shape,rank,params,params_m\n";
      for (const auto& r : rows)
        std::cout << r.format << "," << strategy << "," << r.stage << "," << r.shape << "," << r.rank << ","
                  << r.params << "," << millions(r.params) << "\n";
    } else {
      std::cout << std::left << std::setw(8) << "format" << std::setw(10) << "strategy" << std::setw(7) << "stage"
                << std::setw(18) << "shape" << std::setw(6) << "rank" << std::setw(12) << "params" << "M\n";
      for (const auto& r : rows)
        std::cout << std::setw(8) << r.format << std::setw(10) << strategy << std::setw(7) << r.stage
                  << std::setw(18) << r.shape << std::setw(6) << r.rank << std::setw(12) << r.params
                  << millions(r.params) << "\n";
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// export-plots

struct Point {
  double rank = 0, value = 0;
};

using Series = std::map<std::string, std::vector<Point>>;

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

// Line chart with a log2 rank axis (linear when any rank is 0).
std::string line_svg(const Series& series, const std::string& title, const std::string& ylabel) {
  const double W = 640, H = 420, left = 80, right = 120, top = 40, bottom = 60;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  bool log_x = true;
  for (const auto& [name, pts] : series)
    for (const auto& p : pts)
      if (p.rank <= 0) log_x = false;
  auto xv = [&](double r) { return log_x ? std::log2(r) : r; };
  for (const auto& [name, pts] : series)
    for (const auto& p : pts) {
      xmin = std::min(xmin, xv(p.rank));
      xmax = std::max(xmax, xv(p.rank));
      ymin = std::min(ymin, p.value);
      ymax = std::max(ymax, p.value);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double r) { return left + (xv(r) - xmin) / (xmax - xmin) * (W - left - right); };
  auto py = [&](double v) { return H - bottom - (v - ymin) / (ymax - ymin) * (H - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream o;
  o << std::setprecision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << svg_escape(title)
    << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  std::set<double> ticks;
  for (const auto& [name, pts] : series)
    for (const auto& p : pts) ticks.insert(p.rank);
  for (double r : ticks) {
    o << "<text x=\"" << px(r) << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << r
      << "</text>\n";
  }
  for (double v : {ymin, (ymin + ymax) / 2, ymax}) {
    o << "<text x=\"" << left - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << v
      << "</text>\n";
  }
  o << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 16 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << (log_x ? "rank (log2)" : "rank") << "</text>\n";
  o << "<text x=\"18\" y=\"" << (top + H - bottom) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" "
    << "transform=\"rotate(-90 18 " << (top + H - bottom) / 2 << ")\">" << svg_escape(ylabel) << "</text>\n";
  std::size_t i = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[i % 6];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : pts) o << px(p.rank) << "," << py(p.value) << " ";
    o << "\"/>\n";
    for (const auto& p : pts)
      o << "<circle cx=\"" << px(p.rank) << "\" cy=\"" << py(p.value) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    o << "<text x=\"" << W - right + 10 << "\" y=\"" << top + 16 * static_cast<double>(i) + 10 << "\" fill=\"" << color
      << "\" font-size=\"12\">" << svg_escape(name) << "</text>\n";
    ++i;
  }
  o << "</svg>\n";
  return o.str();
}

struct ExportPlots {
  Command cmd;
  std::string metrics;
  std::string out;

  void add(CLI::App& app) {
    cmd.app = app.add_subcommand("export-plots", "accuracy-vs-rank and params-vs-rank CSV and SVG");
    cmd.add("--metrics", "metrics", metrics, "metrics CSV files, comma separated")->required();
    cmd.add("--out", "out", out, "output directory")->required();
  }

  struct Run {
    double acc = -1;
    std::size_t final_epoch = 0;
    double val_acc = -1;
    bool has_test = false;
    std::size_t factor_params = 0;
  };

  int run() {
    cmd.print_resolved();
    // (format, rank, scale) -> run summary
    std::map<std::tuple<std::string, std::size_t, double>, Run> runs;
    std::size_t rows = 0;
    for (const auto& file : split(metrics, ',')) {
      std::ifstream in(file);
      if (!in) throw DataError("cannot open metrics file " + file);
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == fact::kMetricsHeader) continue;
        const auto where = file + ":" + std::to_string(lineno);
        const auto f = split(line, ',');
        if (f.size() != 9) throw DataError(where + ": expected 9 fields, got " + std::to_string(f.size()));
        try {
          const auto rank = parse_number<std::size_t>(f[1], "rank");
          const auto scale = parse_number<double>(f[2], "scale");
          const auto epoch = parse_number<std::size_t>(f[3], "epoch");
          auto& run = runs[{f[0], rank, scale}];
          run.factor_params = parse_number<std::size_t>(f[8], "factor_params");
          if (f[4] == "test") {
            run.acc = parse_number<double>(f[6], "acc");
            run.has_test = true;
          } else if (f[4] == "val") {
            if (epoch >= run.final_epoch) {
              run.final_epoch = epoch;
              run.val_acc = parse_number<double>(f[6], "acc");
            }
          } else if (f[4] != "train") {
            throw DataError("unknown split '" + f[4] + "'");
          }
        } catch (const ConfigError& e) {
          throw DataError(where + ": " + e.what());
        } catch (const DataError& e) {
          throw DataError(where + ": " + e.what());
        }
        ++rows;
      }
    }
    if (rows == 0) throw DataError("no metric rows in " + metrics);

    // Best scale per (format, rank); test accuracy when present, else final val.
    std::map<std::pair<std::string, std::size_t>, std::pair<double, std::size_t>> best;
    for (const auto& [key, run] : runs) {
      const double acc = run.has_test ? run.acc : run.val_acc;
      if (acc < 0) continue;
      auto k = std::make_pair(std::get<0>(key), std::get<1>(key));
      auto it = best.find(k);
      if (it == best.end() || acc > it->second.first) best[k] = {acc, run.factor_params};
    }
    if (best.empty()) throw DataError("metrics contain no accuracy rows");

    Series acc_series, param_series;
    std::ostringstream acc_csv, param_csv;
    acc_csv << "format,rank,acc\n";
    param_csv << "format,rank,params\n";
    for (const auto& [k, v] : best) {
      acc_csv << k.first << "," << k.second << "," << fmt_double(v.first) << "\n";
      param_csv << k.first << "," << k.second << "," << v.second << "\n";
      acc_series[k.first].push_back({static_cast<double>(k.second), v.first});
      param_series[k.first].push_back({static_cast<double>(k.second), static_cast<double>(v.second)});
    }
    const fs::path dir = out;
    write_text(dir / "acc_vs_rank.csv", acc_csv.str());
    write_text(dir / "params_vs_rank.csv", param_csv.str());
    write_text(dir / "acc_vs_rank.svg", line_svg(acc_series, "accuracy vs rank", "accuracy"));
    write_text(dir / "params_vs_rank.svg", line_svg(param_series, "trainable factors vs rank", "parameters"));
    std::cout << "wrote " << best.size() << " point(s) to " << dir.string() << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------
// Config file: key = value lines (INI sections name a command). Items are
// spliced in as flags ahead of the real arguments so command-line flags win.

std::vector<std::string> config_tokens(const std::string& path, const std::string& command) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path);
  } catch (const CLI::Error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  std::vector<std::string> out;
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    if (!it.parents.empty() && it.parents.front() != command) continue;
    std::string value;
    for (const auto& v : it.inputs) value += (value.empty() ? "" : ",") + v;
    out.push_back((it.name.size() == 1 ? "-" : "--") + it.name + (it.name.size() == 1 ? "" : "=" + value));
    if (it.name.size() == 1) out.push_back(value);
  }
  return out;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int fail(int code, const char* kind, const std::string& msg) {
  std::cerr << "error: " << kind << ": " << one_line(msg) << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fact: tensorized factor fine-tuning for vision transformers"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "key=value config file; flags override it");

  Pretrain pretrain;
  Train train;
  Sweep sweep;
  Eval eval;
  Merge merge;
  CountParams count;
  ExportPlots plots;
  pretrain.add(app);
  train.add(app);
  sweep.add(app);
  eval.add(app);
  merge.add(app);
  count.add(app);
  plots.add(app);

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // Locate the command and any --config before CLI11 sees the arguments.
    std::string cfg;
    std::size_t command_at = args.size();
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) cfg = args[i + 1];
      else if (args[i].starts_with("--config=")) cfg = args[i].substr(9);
      else if (command_at == args.size() && !args[i].starts_with("-") && (i == 0 || args[i - 1] != "--config")) {
        if (app.get_subcommand_no_throw(args[i]) != nullptr) command_at = i;
      }
    }
    if (!cfg.empty() && command_at < args.size()) {
      auto tokens = config_tokens(cfg, args[command_at]);
      args.insert(args.begin() + static_cast<std::ptrdiff_t>(command_at) + 1, tokens.begin(), tokens.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.what());
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "pretrain") return pretrain.run();
    if (name == "train") return train.run();
    if (name == "sweep") return sweep.run();
    if (name == "eval") return eval.run();
    if (name == "merge") return merge.run();
    if (name == "count-params") return count.run();
    if (name == "export-plots") return plots.run();
    return fail(kExitInternal, "internal", "unhandled command " + name);
  } catch (const fact::DivergenceError& e) {
    return fail(kExitDivergence, "divergence", e.what());
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const fact::DimensionError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const fact::CheckpointError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kExitData, "data", e.what());
  } catch (const std::exception& e) {
    return fail(kExitInternal, "internal", e.what());
  }
}
