// gbn: train networks with generalized batch normalization and compare
// deviation measures.
//
//   gbn run --data-dir data/mnist --specs sd,rsd,sqd1 --epochs 5 --out-dir out
//   gbn run --synth --specs sd --epochs 1 --out-dir /tmp/smoke
//   gbn histogram --checkpoint out/sd_epoch5.ckpt --spec sd --layer 1 --feature 0 ...

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <string>

#include <CLI11.hpp>

#include "gbn/gbn.hpp"

namespace {

using gbn::experiment::TrainConfig;

struct RunFlags {
  std::string config_path;
  std::string arch, specs, data_dir, out_dir;
  double lr = 0, epsilon = 0, momentum = 0;
  std::size_t batch_size = 0, epochs = 0, train_subset = 0, test_subset = 0, repeats = 0,
              jobs = 0, checkpoint_every = 0, histogram_layer = 0, histogram_feature = 0;
  std::uint64_t seed = 0;
  bool synth = false, no_checkpoints = false;
};

void add_run_options(CLI::App& cmd, RunFlags& f) {
  cmd.add_option("--config", f.config_path, "JSON config file; flags override its keys")
      ->check(CLI::ExistingFile);
  cmd.add_option("--arch", f.arch, "mlp_small | lenet_small");
  cmd.add_option("--specs", f.specs, "comma-separated: sd,mad,rsd,sqd1,sqd2,sqd3,rbd,wcd");
  cmd.add_option("--lr", f.lr, "SGD learning rate");
  cmd.add_option("--batch-size", f.batch_size, "training batch size");
  cmd.add_option("--epochs", f.epochs, "epochs per spec");
  cmd.add_option("--seed", f.seed, "initialization and shuffling seed");
  cmd.add_option("--data-dir", f.data_dir, "directory with MNIST IDX files (.gz accepted)");
  cmd.add_option("--out-dir", f.out_dir, "output directory");
  cmd.add_flag("--synth", f.synth, "use the synthetic digit generator instead of MNIST");
  cmd.add_option("--train-subset", f.train_subset, "number of training examples");
  cmd.add_option("--test-subset", f.test_subset, "number of test examples");
  cmd.add_option("--epsilon", f.epsilon, "GBN denominator offset");
  cmd.add_option("--momentum", f.momentum, "running-statistics momentum");
  cmd.add_option("--repeats", f.repeats, "reruns with reshuffled data");
  cmd.add_option("--jobs", f.jobs, "specs trained concurrently");
  cmd.add_option("--checkpoint-every", f.checkpoint_every, "also checkpoint every k epochs");
  cmd.add_flag("--no-checkpoints", f.no_checkpoints, "skip checkpoint files");
  cmd.add_option("--histogram-layer", f.histogram_layer, "GBN layer index for histogram dumps");
  cmd.add_option("--histogram-feature", f.histogram_feature, "channel for histogram dumps");
}

TrainConfig resolve(const CLI::App& cmd, const RunFlags& f) {
  TrainConfig c = f.config_path.empty() ? TrainConfig{} : TrainConfig::from_file(f.config_path);
  auto given = [&](const char* name) { return cmd.count(name) > 0; };
  if (given("--arch")) c.arch = gbn::experiment::parse_arch(f.arch);
  if (given("--specs")) c.specs = TrainConfig::split_specs(f.specs);
  if (given("--lr")) c.lr = f.lr;
  if (given("--batch-size")) c.batch_size = f.batch_size;
  if (given("--epochs")) c.epochs = f.epochs;
  if (given("--seed")) c.seed = f.seed;
  if (given("--data-dir")) c.data_dir = f.data_dir;
  if (given("--out-dir")) c.out_dir = f.out_dir;
  if (given("--synth")) c.synth = f.synth;
  if (given("--train-subset")) c.train_subset = f.train_subset;
  if (given("--test-subset")) c.test_subset = f.test_subset;
  if (given("--epsilon")) c.epsilon = f.epsilon;
  if (given("--momentum")) c.momentum = f.momentum;
  if (given("--repeats")) c.repeats = f.repeats;
  if (given("--jobs")) c.jobs = f.jobs;
  if (given("--checkpoint-every")) c.checkpoint_every = f.checkpoint_every;
  if (given("--no-checkpoints")) c.checkpoints = false;
  if (given("--histogram-layer")) c.histogram_layer = f.histogram_layer;
  if (given("--histogram-feature")) c.histogram_feature = f.histogram_feature;
  c.validate();
  return c;
}

int run_command(const CLI::App& cmd, const RunFlags& f) {
  const auto cfg = resolve(cmd, f);
  const auto result = gbn::experiment::run(cfg);
  int diverged = 0;
  for (const auto& o : result.outcomes) {
    if (o.status != "ok") {
      ++diverged;
      std::cerr << "spec " << o.spec << ": " << o.status << " after " << o.records.size()
                << " epoch(s)\n";
    } else if (!o.records.empty()) {
      const auto& last = o.records.back();
      std::printf("%-6s epoch %zu  loss %.4f  test error %.2f%%\n", o.spec.c_str(), last.epoch,
                  last.train_loss, last.test_error_pct);
    }
  }
  std::printf("metrics: %s\n", result.metrics_path.string().c_str());
  return 0;
}

struct HistogramFlags {
  std::string checkpoint, arch = "mlp_small", spec, data_dir, out_dir = ".";
  std::size_t layer = 0, feature = 0, batch_size = 100;
  std::uint64_t seed = 1;
  bool synth = false;
};

int histogram_command(const HistogramFlags& f) {
  const auto spec = gbn::DeviationSpec::parse(f.spec);
  auto model = gbn::experiment::build_model(gbn::experiment::parse_arch(f.arch), spec, f.seed, {});
  if (!f.checkpoint.empty()) gbn::experiment::load_checkpoint(model, f.checkpoint);
  gbn::data::Dataset test;
  if (f.synth) {
    test = gbn::data::synth_digits(f.batch_size, f.seed);
  } else {
    if (f.data_dir.empty()) throw std::invalid_argument("histogram: set --data-dir or --synth");
    test = gbn::data::load_mnist_dir(f.data_dir).second.head(f.batch_size);
  }
  std::vector<std::size_t> idx(std::min(f.batch_size, test.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto [x, y] = test.gather(idx);
  gbn::experiment::histogram_dump(model, f.layer, f.feature, x, f.out_dir, spec.name());
  std::printf("wrote %s_layer%zu_feat%zu_{pre,post}.csv to %s\n", spec.name().c_str(), f.layer,
              f.feature, f.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generalized batch normalization experiments"};
  app.require_subcommand(1);

  RunFlags run_flags;
  auto* run = app.add_subcommand("run", "train one model per deviation spec and write metrics.csv");
  add_run_options(*run, run_flags);

  HistogramFlags hist;
  auto* histo = app.add_subcommand("histogram", "dump pre/post GBN histograms of one feature");
  histo->add_option("--checkpoint", hist.checkpoint, "checkpoint to load (default: fresh init)");
  histo->add_option("--arch", hist.arch, "mlp_small | lenet_small");
  histo->add_option("--spec", hist.spec, "deviation spec name")->required();
  histo->add_option("--layer", hist.layer, "GBN layer index")->required();
  histo->add_option("--feature", hist.feature, "channel index")->required();
  histo->add_option("--data-dir", hist.data_dir, "MNIST directory (test split is used)");
  histo->add_flag("--synth", hist.synth, "use synthetic digits");
  histo->add_option("--batch-size", hist.batch_size, "examples in the probe batch");
  histo->add_option("--seed", hist.seed, "initialization seed");
  histo->add_option("--out-dir", hist.out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_command(*run, run_flags);
    if (*histo) return histogram_command(hist);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
