// Command-line driver: generate, train, evaluate, sweep, translate.
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <iostream>

#include "susan/commands.hpp"

using namespace susan;

namespace {

constexpr int kOk = 0;
constexpr int kValidationError = 1;
constexpr int kRuntimeError = 2;

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::string precision = "f32";
};

CommandContext make_context(const GlobalFlags& g) {
  CommandContext ctx;
  ctx.config = g.config.empty() ? ExperimentConfig{} : load_experiment_config(g.config);
  if (g.seed) ctx.config.seed = *g.seed;
  if (!g.out.empty()) ctx.config.output = g.out;
  ctx.config.validate();
  ctx.out = ctx.config.output;
  ctx.force = g.force;
  ctx.precision = parse_precision(g.precision);
  ctx.log = [](const std::string& m) { spdlog::info("{}", m); };
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic two-domain segmentation experiments (R-Net generators, patch discriminators)"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags g;
  app.add_option("--config", g.config, "Experiment config (INI)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_flag("--force", g.force, "Replace existing outputs");
  app.add_option("--precision", g.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  auto* generate = app.add_subcommand("generate", "Generate the phantom datasets");

  auto* train = app.add_subcommand("train", "Train one or all configured methods");
  std::string method;
  bool resume = false;
  std::uint64_t stop_after = 0;
  train->add_option("--method", method, "susan or supervised-baseline (default: every configured method)");
  train->add_flag("--resume", resume, "Continue from the last checkpoint");
  train->add_option("--stop-after", stop_after, "Pause after this many iterations");

  auto* evaluate = app.add_subcommand("evaluate", "Score trained methods on the target test split");

  auto* sweep = app.add_subcommand("sweep", "Retrain SUSAN for each segmentation weight and compare");
  bool parallel = false;
  sweep->add_flag("--parallel", parallel, "Train the values concurrently");

  auto* translate = app.add_subcommand("translate", "Write translated images and previews");
  std::string direction = "forward", split, translate_method = "susan";
  translate->add_option("--direction", direction, "forward (reference to target) or backward");
  translate->add_option("--split", split, "Dataset split to translate");
  translate->add_option("--method", translate_method, "Checkpoint to use");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidationError;
  }

  try {
    CommandContext ctx = make_context(g);
    if (generate->parsed()) {
      cmd_generate(ctx);
    } else if (train->parsed()) {
      ctx.resume = resume;
      ctx.stop_after = stop_after;
      if (method.empty()) {
        for (TrainMode m : ctx.config.methods) cmd_train(ctx, m);
      } else {
        cmd_train(ctx, parse_train_mode(method));
      }
    } else if (evaluate->parsed()) {
      const auto report = cmd_evaluate(ctx);
      for (const auto& m : report.methods) {
        for (const auto& r : m.rows) {
          spdlog::info("{:<20} {:<18} DC {:.4f} +- {:.4f}", to_string(m.method), class_name(r.cls), r.dc.mean, r.dc.std);
        }
      }
      if (report.fcn) spdlog::info("FCN-score real {:.4f}, synthetic {:.4f}", report.fcn->real, report.fcn->synthetic);
    } else if (sweep->parsed()) {
      ctx.parallel = parallel;
      for (const auto& r : cmd_sweep(ctx)) {
        spdlog::info("lambda_seg {:g}: mean DC {:.4f}, FCN-score {:.4f}", r.lambda_seg, r.mean_dice, r.fcn_score);
      }
    } else if (translate->parsed()) {
      cmd_translate(ctx, parse_direction(direction), split, parse_train_mode(translate_method));
    }
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return kValidationError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntimeError;
  }
  return kOk;
}
