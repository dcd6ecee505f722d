#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plc/data_synth.hpp"
#include "plc/error.hpp"
#include "plc/runner.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kNumericExit = 3;

struct Options {
  std::string config;
  std::string out = "run";
  std::string run_dir;
  std::vector<std::string> arms;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::size_t folds = 0;
  std::string loss;
  double unannotated = -1.0;
  bool quiet = false;
};

bool given(CLI::App& sub, const std::string& name) {
  const auto* opt = sub.get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

plc::RunConfig resolve(const Options& o, CLI::App& sub) {
  plc::RunConfig cfg = o.config.empty() ? plc::RunConfig{} : plc::load_config(o.config);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw plc::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (given(sub, "--seed")) {
    cfg.train.seed = o.seed;
    cfg.synth.seed = o.seed;
  }
  if (given(sub, "--folds")) cfg.train.folds = o.folds;
  if (given(sub, "--loss")) cfg.loss.family = plc::parse_loss_family(o.loss);
  if (given(sub, "--unannotated-fraction")) cfg.train.unannotated_fraction = o.unannotated;
  return cfg;
}

void common_flags(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "key=value configuration file");
  sub->add_option("--set", o.overrides, "override one config key (key=value), repeatable");
  sub->add_option("--seed", o.seed, "seed for training and synthesis");
  sub->add_option("--out", o.out, "output directory");
  sub->add_flag("--quiet", o.quiet, "suppress progress lines");
}

}  // namespace

int main(int argc, char** argv) {
  // Op outputs are tens of MB; keep freed blocks instead of unmapping them.
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1024 << 20);
  CLI::App app{"Patch-grid weakly supervised localization"};
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  common_flags(synth, o);

  auto* train = app.add_subcommand("train", "two-phase training with threshold alternation");
  common_flags(train, o);
  train->add_option("--folds", o.folds, "cross-validation folds");
  train->add_option("--loss", o.loss, "baseline|sigmoid|relu");
  train->add_option("--unannotated-fraction", o.unannotated, "share of unannotated samples used");

  auto* eval = app.add_subcommand("eval", "score fold checkpoints of a training run");
  common_flags(eval, o);
  eval->add_option("--run", o.run_dir, "training output directory")->required();
  eval->add_option("--folds", o.folds, "cross-validation folds");

  auto* compare = app.add_subcommand("compare", "train arms on identical folds and tabulate");
  common_flags(compare, o);
  compare->add_option("--arm", o.arms, "name:loss=relu,unannotated=0.2 (repeatable)")->required();
  compare->add_option("--folds", o.folds, "cross-validation folds");

  auto* stability = app.add_subcommand("stability", "product-vs-hinge numerical stability table");
  stability->add_option("--out", o.out, "output directory");

  auto* report = app.add_subcommand("report", "summarize a finished run as markdown");
  report->add_option("--run", o.run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    const plc::Logger log(o.quiet ? nullptr : &std::cerr);
    if (*synth) {
      const auto cfg = resolve(o, *synth);
      plc::generate(cfg.synth, o.out);
      log.info("wrote " + std::to_string(cfg.synth.images) + " images to " + o.out);
    } else if (*train) {
      const auto cfg = resolve(o, *train);
      const auto r = plc::cmd_train(cfg, o.out, log);
      if (r.summaries.front().mean_iou) log.info("mean IoU accuracy " + std::to_string(*r.summaries.front().mean_iou));
    } else if (*eval) {
      const auto cfg = resolve(o, *eval);
      const auto r = plc::cmd_eval(cfg, o.run_dir, o.out, log);
      if (r.summaries.front().mean_iou) log.info("mean IoU accuracy " + std::to_string(*r.summaries.front().mean_iou));
    } else if (*compare) {
      const auto cfg = resolve(o, *compare);
      std::vector<plc::Arm> arms;
      for (const auto& a : o.arms) arms.push_back(plc::parse_arm(a));
      plc::cmd_compare(cfg, arms, o.out, log);
    } else if (*stability) {
      plc::cmd_stability(o.out);
    } else if (*report) {
      plc::cmd_report(o.run_dir);
    }
  } catch (const plc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const plc::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumericExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
