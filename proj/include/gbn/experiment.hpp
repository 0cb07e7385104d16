#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gbn/data.hpp"
#include "gbn/deviation.hpp"
#include "gbn/gbn_layer.hpp"
#include "gbn/nn.hpp"
#include "gbn/ops.hpp"
#include "gbn/tensor.hpp"

namespace gbn::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Arch { mlp_small, lenet_small };

inline std::string to_string(Arch a) { return a == Arch::mlp_small ? "mlp_small" : "lenet_small"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp_small") return Arch::mlp_small;
  if (s == "lenet_small") return Arch::lenet_small;
  throw std::invalid_argument("unknown architecture '" + s + "' (expected mlp_small|lenet_small)");
}

// WCD is left out: centering at sup x sends every ReLU input to <= 0.
inline const std::vector<std::string>& default_specs() {
  static const std::vector<std::string> specs{"sd", "mad", "rsd", "sqd1", "sqd2", "sqd3", "rbd"};
  return specs;
}

struct TrainConfig {
  Arch arch = Arch::mlp_small;
  std::vector<std::string> specs = default_specs();
  double lr = 0.01;
  std::size_t batch_size = 100;
  std::size_t epochs = 5;
  std::uint64_t seed = 1;
  double epsilon = 1e-5;
  double momentum = 0.1;
  std::string data_dir;
  bool synth = false;
  std::size_t train_subset = 2000;
  std::size_t test_subset = 1000;
  std::string out_dir = "out";
  std::size_t repeats = 1;
  std::size_t jobs = 1;
  std::size_t checkpoint_every = 0;  // 0: final epoch only
  bool checkpoints = true;
  std::optional<std::size_t> histogram_layer;
  std::size_t histogram_feature = 0;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("config: lr must be > 0");
    if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (specs.empty()) throw std::invalid_argument("config: specs must be nonempty");
    for (const auto& s : specs) (void)DeviationSpec::parse(s);
    if (repeats < 1) throw std::invalid_argument("config: repeats must be >= 1");
    if (jobs < 1) throw std::invalid_argument("config: jobs must be >= 1");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("config: epsilon must be >= 0");
    if (!(momentum > 0.0 && momentum <= 1.0))
      throw std::invalid_argument("config: momentum must lie in (0, 1]");
    if (!synth && data_dir.empty())
      throw std::invalid_argument("config: set data_dir or synth");
    if (train_subset < 1 || test_subset < 1)
      throw std::invalid_argument("config: subset sizes must be >= 1");
  }

  /// Flat JSON object; unknown keys are rejected. `specs` may be an array or
  /// a comma-separated string.
  static TrainConfig from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    TrainConfig c;
    for (const auto& [key, v] : j.items()) {
      if (key == "arch") c.arch = parse_arch(v.get<std::string>());
      else if (key == "specs") c.specs = v.is_string() ? split_specs(v.get<std::string>())
                                                       : v.get<std::vector<std::string>>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "epsilon") c.epsilon = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "data_dir") c.data_dir = v.get<std::string>();
      else if (key == "synth") c.synth = v.get<bool>();
      else if (key == "train_subset") c.train_subset = v.get<std::size_t>();
      else if (key == "test_subset") c.test_subset = v.get<std::size_t>();
      else if (key == "out_dir") c.out_dir = v.get<std::string>();
      else if (key == "repeats") c.repeats = v.get<std::size_t>();
      else if (key == "jobs") c.jobs = v.get<std::size_t>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
      else if (key == "checkpoints") c.checkpoints = v.get<bool>();
      else if (key == "histogram_layer") c.histogram_layer = v.get<std::size_t>();
      else if (key == "histogram_feature") c.histogram_feature = v.get<std::size_t>();
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    return c;
  }

  static TrainConfig from_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path.string());
    json j;
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw std::invalid_argument("config: " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  static std::vector<std::string> split_specs(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  }
};

struct MetricsRecord {
  std::string spec;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_error_pct = 0.0;
  double seconds = 0.0;
  double sparsity = 0.0;  // zero fraction after the ReLUs that follow GBN layers
};

inline std::string format_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader = "spec,epoch,train_loss,test_error_pct,seconds,sparsity";

inline std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.spec + "," + std::to_string(r.epoch) + "," + format_g6(r.train_loss) + "," +
           format_g6(r.test_error_pct) + "," + format_g6(r.seconds) + "," +
           format_g6(r.sparsity) + "\n";
  }
  return out;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Checkpoints: a flat JSON object of tensor names to number arrays.

inline json checkpoint_json(const nn::Model& model) {
  json j = json::object();
  for (const auto& [name, t] : model.parameters()) {
    j[name] = std::vector<double>(t.data().begin(), t.data().end());
  }
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (const auto* st = std::get_if<GbnState>(&layers[i])) {
      const std::string p = "layer" + std::to_string(i) + ".";
      j[p + "running_s"] = st->running_s;
      j[p + "running_d"] = st->running_d;
      j[p + "batches_seen"] = std::vector<double>{static_cast<double>(st->batches_seen)};
    }
  }
  return j;
}

inline void save_checkpoint(const nn::Model& model, const fs::path& path) {
  write_text(path, checkpoint_json(model).dump() + "\n");
}

inline void restore_checkpoint(nn::Model& model, const json& j) {
  auto fetch = [&](const std::string& name, std::size_t n) {
    if (!j.contains(name)) throw std::invalid_argument("checkpoint: missing '" + name + "'");
    auto v = j.at(name).get<std::vector<double>>();
    if (v.size() != n)
      throw std::invalid_argument("checkpoint: '" + name + "' has " + std::to_string(v.size()) +
                                  " values, expected " + std::to_string(n));
    return v;
  };
  for (auto& [name, t] : model.parameters()) {
    const auto v = fetch(name, t.size());
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
  auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (auto* st = std::get_if<GbnState>(&layers[i])) {
      const std::string p = "layer" + std::to_string(i) + ".";
      st->running_s = fetch(p + "running_s", st->channels());
      st->running_d = fetch(p + "running_d", st->channels());
      st->batches_seen = static_cast<std::size_t>(fetch(p + "batches_seen", 1)[0]);
    }
  }
}

inline void load_checkpoint(nn::Model& model, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("checkpoint: cannot open " + path.string());
  json j;
  in >> j;
  restore_checkpoint(model, j);
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
  double bin_left(std::size_t i) const { return lo + bin_width() * static_cast<double>(i); }
  double bin_right(std::size_t i) const {
    return i + 1 == counts.size() ? hi : lo + bin_width() * static_cast<double>(i + 1);
  }
  std::size_t total() const {
    std::size_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

/// Equal-width bins spanning [min, max]; a constant sample lands in bin 0.
inline Histogram make_histogram(std::span<const double> values, std::size_t bins = 64) {
  if (values.empty()) throw std::invalid_argument("histogram: no values");
  if (bins == 0) throw std::invalid_argument("histogram: zero bins");
  Histogram h;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  h.lo = *mn;
  h.hi = *mx;
  h.counts.assign(bins, 0);
  const double width = h.hi - h.lo;
  for (double v : values) {
    std::size_t b = 0;
    if (width > 0.0) {
      b = static_cast<std::size_t>((v - h.lo) / width * static_cast<double>(bins));
      b = std::min(b, bins - 1);
    }
    ++h.counts[b];
  }
  return h;
}

inline std::string histogram_csv(const Histogram& h) {
  std::string out = "bin_left,bin_right,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    out += format_g6(h.bin_left(i)) + "," + format_g6(h.bin_right(i)) + "," +
           std::to_string(h.counts[i]) + "\n";
  }
  return out;
}

struct FeatureHistograms {
  Histogram pre;
  Histogram post;
};

/// Distribution of one channel entering and leaving GBN layer `layer` for a
/// train-mode pass over `batch`. Runs on a copy, so running statistics are
/// left untouched.
inline FeatureHistograms feature_histograms(const nn::Model& model, std::size_t layer,
                                            std::size_t feature, const Tensor& batch,
                                            std::size_t bins = 64) {
  if (layer >= model.layers().size()) {
    throw std::out_of_range("histogram: layer index " + std::to_string(layer) + " out of range");
  }
  const auto* st = std::get_if<GbnState>(&model.layers()[layer]);
  if (!st) throw std::invalid_argument("histogram: layer " + std::to_string(layer) + " is not GBN");
  if (feature >= st->channels()) {
    throw std::out_of_range("histogram: feature index " + std::to_string(feature) +
                            " out of range (" + std::to_string(st->channels()) + " channels)");
  }
  auto probe = model.clone();
  Tape tape(false);
  std::vector<Tensor> trace;
  const Tensor x = batch;
  probe.forward(tape, x, Mode::train, &trace);
  const Tensor& in = layer == 0 ? x : trace[layer - 1];
  const Tensor& out = trace[layer];
  const Shape& s = out.shape();
  const std::size_t n = s[0], c = s[1], spatial = out.size() / (n * c);
  std::vector<double> pre, post;
  pre.reserve(n * spatial);
  post.reserve(n * spatial);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < spatial; ++k) {
      const auto o = (b * c + feature) * spatial + k;
      pre.push_back(in[o]);
      post.push_back(out[o]);
    }
  return {make_histogram(pre, bins), make_histogram(post, bins)};
}

inline void histogram_dump(const nn::Model& model, std::size_t layer, std::size_t feature,
                           const Tensor& batch, const fs::path& out_dir,
                           const std::string& spec_name) {
  const auto h = feature_histograms(model, layer, feature, batch);
  const std::string stem = spec_name + "_layer" + std::to_string(layer) + "_feat" +
                           std::to_string(feature);
  fs::create_directories(out_dir);
  write_text(out_dir / (stem + "_pre.csv"), histogram_csv(h.pre));
  write_text(out_dir / (stem + "_post.csv"), histogram_csv(h.post));
}

// ---------------------------------------------------------------------------
// Training

inline nn::Model build_model(Arch arch, const DeviationSpec& spec, std::uint64_t seed,
                             nn::GbnOptions opts) {
  return arch == Arch::mlp_small ? nn::build_mlp_small(spec, seed, opts)
                                 : nn::build_lenet_small(10, spec, seed, opts);
}

struct SpecOutcome {
  std::string spec;
  std::string status = "ok";  // ok | nan_loss
  std::vector<MetricsRecord> records;
};

struct Datasets {
  data::Dataset train;
  data::Dataset test;
};

inline Datasets load_datasets(const TrainConfig& cfg) {
  if (cfg.synth) {
    auto all = data::synth_digits(cfg.train_subset + cfg.test_subset, cfg.seed);
    std::vector<std::size_t> tr(cfg.train_subset), te(cfg.test_subset);
    std::iota(tr.begin(), tr.end(), std::size_t{0});
    std::iota(te.begin(), te.end(), cfg.train_subset);
    auto [xtr, ytr] = all.gather(tr);
    auto [xte, yte] = all.gather(te);
    return {{std::move(xtr), std::move(ytr)}, {std::move(xte), std::move(yte)}};
  }
  auto [train, test] = data::load_mnist_dir(cfg.data_dir);
  return {train.head(cfg.train_subset), test.head(cfg.test_subset)};
}

/// Trains one spec from the seed-derived initialization and returns one
/// record per epoch. Stops early (status "nan_loss") on a non-finite loss.
inline SpecOutcome train_spec(const TrainConfig& cfg, const std::string& spec_name,
                              const Datasets& ds, std::uint64_t shuffle_seed,
                              const fs::path& out_dir) {
  const auto spec = DeviationSpec::parse(spec_name);
  auto model = build_model(cfg.arch, spec, cfg.seed, {cfg.epsilon, cfg.momentum});
  const auto gbn_idx = model.gbn_layer_indices();
  SpecOutcome outcome;
  outcome.spec = spec.name();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t zeros = 0, relu_elems = 0;
    bool diverged = false;
    for (const auto& idx : data::batches(ds.train, cfg.batch_size, shuffle_seed, epoch)) {
      auto [x, y] = ds.train.gather(idx);
      Tape tape;
      std::vector<Tensor> trace;
      const auto logits = model.forward(tape, x, Mode::train, &trace);
      const auto loss = ops::softmax_cross_entropy(tape, logits, y);
      if (!std::isfinite(loss.item())) {
        diverged = true;
        break;
      }
      loss_sum += loss.item() * static_cast<double>(idx.size());
      for (auto g : gbn_idx) {
        if (g + 1 >= trace.size() || !std::holds_alternative<nn::ReluLayer>(model.layers()[g + 1]))
          continue;
        for (double v : trace[g + 1].data()) zeros += v == 0.0;
        relu_elems += trace[g + 1].size();
      }
      tape.backward(loss);
      nn::sgd_step(model, cfg.lr);
    }
    if (diverged) {
      outcome.status = "nan_loss";
      break;
    }
    MetricsRecord rec;
    rec.spec = outcome.spec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(ds.train.size());
    rec.test_error_pct = nn::evaluate_error_rate(model, ds.test);
    rec.sparsity = relu_elems ? static_cast<double>(zeros) / static_cast<double>(relu_elems) : 0.0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    outcome.records.push_back(rec);

    const bool last = epoch == cfg.epochs;
    if (cfg.checkpoints && (last || (cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0))) {
      save_checkpoint(model, out_dir / (outcome.spec + "_epoch" + std::to_string(epoch) + ".ckpt"));
    }
  }

  if (cfg.histogram_layer) {
    std::vector<std::size_t> first(std::min(cfg.batch_size, ds.test.size()));
    std::iota(first.begin(), first.end(), std::size_t{0});
    auto [x, y] = ds.test.gather(first);
    histogram_dump(model, *cfg.histogram_layer, cfg.histogram_feature, x, out_dir, outcome.spec);
  }
  return outcome;
}

struct RunResult {
  std::vector<SpecOutcome> outcomes;  // config spec order
  fs::path metrics_path;
};

namespace detail {

inline std::vector<SpecOutcome> train_all(const TrainConfig& cfg, const Datasets& ds,
                                          std::uint64_t shuffle_seed, const fs::path& out_dir) {
  std::vector<SpecOutcome> outcomes(cfg.specs.size());
  std::vector<std::exception_ptr> errors(cfg.specs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cfg.specs.size();) {
      try {
        outcomes[i] = train_spec(cfg, cfg.specs[i], ds, shuffle_seed, out_dir);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(cfg.jobs, cfg.specs.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return outcomes;
}

inline void write_outputs(const std::vector<SpecOutcome>& outcomes, const fs::path& dir) {
  std::vector<MetricsRecord> rows;
  std::string status = "spec,status,epochs_completed\n";
  for (const auto& o : outcomes) {
    rows.insert(rows.end(), o.records.begin(), o.records.end());
    status += o.spec + "," + o.status + "," + std::to_string(o.records.size()) + "\n";
  }
  write_text(dir / "metrics.csv", metrics_csv(rows));
  write_text(dir / "status.csv", status);
}

}  // namespace detail

/// Trains every configured spec and writes metrics.csv, status.csv,
/// checkpoints and optional histograms under `out_dir`. With repeats > 1 each
/// repeat reshuffles the data (seed + r) into `out_dir/rep<r>/`, and
/// `out_dir/summary.csv` holds the mean and std of the final test error.
inline RunResult run(const TrainConfig& cfg) {
  cfg.validate();
  const auto ds = load_datasets(cfg);
  const fs::path root(cfg.out_dir);
  fs::create_directories(root);
  RunResult result;
  if (cfg.repeats == 1) {
    result.outcomes = detail::train_all(cfg, ds, cfg.seed, root);
    detail::write_outputs(result.outcomes, root);
    result.metrics_path = root / "metrics.csv";
    return result;
  }
  std::vector<std::vector<double>> finals(cfg.specs.size());
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    const fs::path dir = root / ("rep" + std::to_string(r));
    fs::create_directories(dir);
    auto outcomes = detail::train_all(cfg, ds, cfg.seed + r, dir);
    detail::write_outputs(outcomes, dir);
    for (std::size_t i = 0; i < outcomes.size(); ++i)
      if (outcomes[i].status == "ok" && !outcomes[i].records.empty())
        finals[i].push_back(outcomes[i].records.back().test_error_pct);
    if (r == 0) {
      result.outcomes = std::move(outcomes);
      result.metrics_path = dir / "metrics.csv";
    }
  }
  std::string summary = "spec,repeats,final_test_error_mean,final_test_error_std\n";
  for (std::size_t i = 0; i < cfg.specs.size(); ++i) {
    const auto& v = finals[i];
    double mean = 0.0, var = 0.0;
    for (double e : v) mean += e;
    if (!v.empty()) mean /= static_cast<double>(v.size());
    for (double e : v) var += (e - mean) * (e - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    summary += DeviationSpec::parse(cfg.specs[i]).name() + "," + std::to_string(v.size()) + "," +
               format_g6(mean) + "," + format_g6(sd) + "\n";
  }
  write_text(root / "summary.csv", summary);
  return result;
}

}  // namespace gbn::experiment
