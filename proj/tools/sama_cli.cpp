// Command-line front end: synthetic data, training, evaluation, gradient
// checks and profiling. Exit codes: 0 success, 1 runtime failure, 2 bad usage.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sama/config.hpp"
#include "sama/data.hpp"
#include "sama/gradsuite.hpp"
#include "sama/metrics.hpp"
#include "sama/profiler.hpp"
#include "sama/train.hpp"

namespace fs = std::filesystem;
using namespace sama;

namespace {

constexpr const char* kRunConfigName = "run.cfg";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for init, batch order and synthetic data");
  cmd->add_option("--set", c.sets, "override one config key, e.g. --set model.heads=2")
      ->type_name("KEY=VALUE");
}

RunConfig resolve(const Common& c, const fs::path& fallback_config = {}) {
  RunConfig cfg = RunConfig::defaults();
  if (!c.config.empty())
    load_config(c.config, cfg);
  else if (!fallback_config.empty() && fs::exists(fallback_config))
    load_config(fallback_config, cfg);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.apply_seed();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_pgm(const fs::path& path, std::size_t H, std::size_t W,
               const std::vector<std::uint8_t>& labels, std::uint8_t cls) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << W << ' ' << H << "\n255\n";
  for (auto l : labels) out.put(static_cast<char>(l == cls ? 255 : 0));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& common, const std::string& out) {
  RunConfig cfg = resolve(common);
  const auto samples = make_synthetic(cfg.data);
  write_dataset(out, samples);
  std::printf("wrote %zu image/mask pairs (%zux%zu, %zu classes) to %s\n", samples.size(),
              cfg.data.height, cfg.data.width, cfg.data.num_classes, out.c_str());
  return 0;
}

struct TrainArgs {
  std::string data, out;
  std::optional<std::size_t> epochs, iters, batch;
  std::optional<double> lr;
  bool save_init = false, quiet = false;
};

int cmd_train(const Common& common, const TrainArgs& a) {
  RunConfig cfg = resolve(common);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.iters) cfg.train.iters_per_epoch = *a.iters;
  if (a.batch) cfg.train.batch_size = *a.batch;
  if (a.lr) cfg.train.adam.lr = *a.lr;
  cfg.validate();
  const auto data = a.data.empty() ? make_synthetic(cfg.data) : read_dataset(a.data);
  SamaUNet<float> model(cfg.model, cfg.seed);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_text(out / kRunConfigName, dump_config(cfg));
  if (a.save_init) save_checkpoint(out / "init", model.parameters());
  std::printf("training %zu params on %zu samples: %zu epochs x %zu iterations, batch %zu\n",
              count_scalars(model.parameters()), data.size(), cfg.train.epochs,
              cfg.train.iters_per_epoch, cfg.train.batch_size);
  const auto log = train(model, data, cfg.train, [&](const EpochLog& e) {
    if (!a.quiet) std::printf("epoch %4zu  lr %.3e  loss %.6f  dsc %.4f\n", e.epoch, e.lr, e.loss, e.dsc);
    std::fflush(stdout);
  });
  write_log_csv(out / "log.csv", log);
  const fs::path ckpt = out / "checkpoint";
  save_checkpoint(ckpt, model.parameters());
  write_text(ckpt / kRunConfigName, dump_config(cfg));
  std::printf("final loss %.6f, train DSC %.4f; checkpoint in %s\n", log.back().loss,
              log.back().dsc, ckpt.c_str());
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, predictions, out = "metrics.csv", pgm;
  double tau = 1.0;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
  if (a.checkpoint.empty() == a.predictions.empty())
    throw ConfigError("eval needs exactly one of --checkpoint or --predictions");
  const fs::path fallback = a.checkpoint.empty() ? fs::path() : fs::path(a.checkpoint) / kRunConfigName;
  RunConfig cfg = resolve(common, fallback);
  std::vector<Sample> truth;
  std::vector<std::vector<std::uint8_t>> preds;
  if (!a.checkpoint.empty()) {
    truth = read_dataset(a.data);
    SamaUNet<float> model(cfg.model, cfg.seed);
    auto params = model.parameters();
    load_checkpoint(a.checkpoint, params);
    for (const auto& s : truth) preds.push_back(predict(model, s));
  } else {
    truth = read_masks(a.data);
    const auto p = read_masks(a.predictions);
    if (p.size() != truth.size())
      throw std::runtime_error(std::to_string(p.size()) + " predictions for " +
                               std::to_string(truth.size()) + " ground-truth masks");
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i].height != truth[i].height || p[i].width != truth[i].width)
        throw std::runtime_error("prediction " + std::to_string(i) + " differs in size");
      preds.push_back(p[i].mask);
    }
  }
  const std::size_t K = cfg.model.num_classes;
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (const auto* m : {&truth[i].mask, &preds[i]})
      for (auto l : *m)
        if (l >= K)
          throw std::runtime_error("sample " + std::to_string(i) + " has label " + std::to_string(l) +
                                   " but model.num_classes is " + std::to_string(K));

  std::ofstream csv(a.out);
  if (!csv) throw std::runtime_error("cannot write " + a.out);
  csv.precision(17);
  csv << "sample_id,class_id,dsc,nsd,flags\n";
  double dsc_total = 0.0, nsd_total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& s = truth[i];
    const auto scores = score_foreground({s.mask, s.height, s.width}, {preds[i], s.height, s.width}, K, a.tau);
    for (const auto& sc : scores)
      csv << i << ',' << static_cast<unsigned>(sc.cls) << ',' << sc.dsc.value << ',' << sc.nsd.value << ','
          << (sc.dsc.both_empty ? "both_empty" : "") << '\n';
    dsc_total += mean_dsc(scores);
    nsd_total += mean_nsd(scores);
    if (!a.pgm.empty()) {
      fs::create_directories(a.pgm);
      for (std::size_t k = 1; k < K; ++k) {
        char name[64];
        std::snprintf(name, sizeof name, "pred_%04zu_class%zu.pgm", i, k);
        write_pgm(fs::path(a.pgm) / name, s.height, s.width, preds[i], static_cast<std::uint8_t>(k));
      }
    }
  }
  if (!csv) throw std::runtime_error("write failed: " + a.out);
  const double n = static_cast<double>(truth.size());
  std::printf("%zu samples, %zu classes (tau %g): mean DSC %.6f, mean NSD %.6f -> %s\n",
              truth.size(), K, a.tau, dsc_total / n, nsd_total / n, a.out.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& level) {
  const auto rows = run_grad_suite(level == "full" ? GradLevel::kFull : GradLevel::kMicro);
  std::fputs(format_grad_suite(rows).c_str(), stdout);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.pass() ? 0 : 1;
  std::printf("%zu of %zu checks passed\n", rows.size() - failed, rows.size());
  return failed == 0 ? 0 : 1;
}

int cmd_profile(const Common& common, std::size_t height, std::size_t width, const std::string& csv) {
  RunConfig cfg = resolve(common);
  const auto rep = profile(cfg.model, height, width ? width : height);
  std::fputs(rep.table().c_str(), stdout);
  if (!csv.empty()) write_text(csv, rep.csv());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation network with aggregated differential attention and multi-view scans"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help for every subcommand");
  Common common;

  auto* synth = app.add_subcommand("synth-data", "write a seeded synthetic image/mask set");
  add_common(synth, common);
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  std::optional<std::size_t> count, size, classes;
  synth->add_option("--count", count, "number of images");
  synth->add_option("--size", size, "image height and width");
  synth->add_option("--classes", classes, "classes including background");

  auto* tr = app.add_subcommand("train", "train and write checkpoint/, log.csv and run.cfg");
  add_common(tr, common);
  TrainArgs ta;
  tr->add_option("--data", ta.data, "dataset directory (default: synthesize from data.* keys)")
      ->check(CLI::ExistingDirectory);
  tr->add_option("--out", ta.out, "run directory")->required();
  tr->add_option("--epochs", ta.epochs);
  tr->add_option("--iters", ta.iters, "iterations per epoch");
  tr->add_option("--batch", ta.batch);
  tr->add_option("--lr", ta.lr, "peak learning rate")->check(CLI::NonNegativeNumber);
  tr->add_flag("--save-init", ta.save_init, "also write the initial parameters to init/");
  tr->add_flag("--quiet", ta.quiet, "no per-epoch lines");

  auto* ev = app.add_subcommand("eval", "per-sample, per-class DSC and NSD as CSV");
  add_common(ev, common);
  EvalArgs ea;
  ev->add_option("--data", ea.data, "ground-truth dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint directory to predict with")
      ->check(CLI::ExistingDirectory);
  ev->add_option("--predictions", ea.predictions, "directory of predicted mask_XXXX.stn")
      ->check(CLI::ExistingDirectory);
  ev->add_option("--out", ea.out, "metrics CSV path");
  ev->add_option("--tau", ea.tau, "NSD tolerance in pixels")->check(CLI::NonNegativeNumber);
  ev->add_option("--pgm", ea.pgm, "directory for per-class binary PGM masks of the predictions");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::string level = "micro";
  gc->add_option("--level", level)->check(CLI::IsMember({"micro", "full"}));

  auto* pr = app.add_subcommand("profile", "analytic parameter and MAC counts per layer");
  add_common(pr, common);
  std::size_t height = 64, width = 0;
  std::string prof_csv;
  pr->add_option("--size", height, "input height (and width unless --width)")->check(CLI::PositiveNumber);
  pr->add_option("--width", width)->check(CLI::PositiveNumber);
  pr->add_option("--csv", prof_csv, "also write the rows as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      if (count) common.sets.push_back("data.count=" + std::to_string(*count));
      if (size) {
        common.sets.push_back("data.height=" + std::to_string(*size));
        common.sets.push_back("data.width=" + std::to_string(*size));
      }
      if (classes) common.sets.push_back("data.num_classes=" + std::to_string(*classes));
      return cmd_synth(common, synth_out);
    }
    if (*tr) return cmd_train(common, ta);
    if (*ev) return cmd_eval(common, ea);
    if (*gc) return cmd_gradcheck(level);
    if (*pr) return cmd_profile(common, height, width, prof_csv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
