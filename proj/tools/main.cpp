#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vitbd/config.hpp"
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"
#include "vitbd/metrics.hpp"
#include "vitbd/pipeline.hpp"

namespace {

struct Options {
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
  std::vector<std::string> report_files;
};

void add_stage_options(CLI::App* cmd, Options& opt) {
  cmd->add_option("--config", opt.config_path, "experiment config JSON")
      ->required();
  cmd->add_option("--seed", opt.seed, "override the config's master seed");
  cmd->add_option("--out", opt.out,
                  "run directory (default: VITBD_OUT_ROOT or the config)");
  cmd->add_flag("--force", opt.force, "overwrite existing artifacts");
}

int run_stage(const std::string& stage, const Options& opt) {
  using namespace vitbd;

  if (stage == "report") {
    const std::string table = cmd_report(opt.report_files);
    if (!opt.out.empty()) {
      if (!opt.force && file_exists(opt.out))
        throw IoError("artifact already exists: " + opt.out +
                      " (pass --force to overwrite)");
      write_file_atomic(opt.out, table);
    }
    std::fputs(table.c_str(), stdout);
    return 0;
  }

  ExperimentConfig cfg = load_experiment(opt.config_path);
  if (opt.seed_set) cfg.seed = opt.seed;
  const RunPaths paths{resolve_out_dir(cfg, opt.out)};
  std::printf("run directory: %s\n", paths.root.c_str());
  std::printf("config hash:   %s\n", config_hash_hex(cfg).c_str());

  if (stage == "train-clean") {
    const TrainResult res = cmd_train_clean(cfg, paths, opt.force);
    std::printf("clean checkpoint: %s\n", paths.clean_ckpt().c_str());
    if (res.holdout_cda >= 0.0)
      std::printf("holdout accuracy: %.4f\n", res.holdout_cda);
    if (cfg.train.min_holdout_cda > 0.0 && !res.reached_floor)
      std::fprintf(stderr,
                   "warning: holdout accuracy %.4f is below the configured "
                   "floor %.4f\n",
                   res.holdout_cda, cfg.train.min_holdout_cda);
  } else if (stage == "gen-trigger") {
    const TriggerGenResult res = cmd_gen_trigger(cfg, paths, opt.force);
    std::printf("trigger: %s\n", paths.trigger_dir().c_str());
    std::printf("attention rate: %.4f initial, %.4f final\n", res.ar_initial,
                res.ar_final);
  } else if (stage == "inject") {
    const InjectionLog log = cmd_inject(cfg, paths, opt.force);
    std::printf("backdoored checkpoint: %s\n", paths.backdoored_ckpt().c_str());
    std::printf("tuned %zu of %zu scalars (tpr %.4f)\n",
                log.selection.tuned_scalars, log.selection.total_scalars,
                log.selection.tpr());
    if (log.final_asr >= 0.0)
      std::printf("monitored asr: %.4f%s\n", log.final_asr,
                  log.stopped_early ? " (stopped early)" : "");
  } else if (stage == "evaluate") {
    const AttackReport r = cmd_evaluate(cfg, paths, opt.force);
    std::fputs(render_report({r}, ReportFormat::text).c_str(), stdout);
  } else if (stage == "run-all") {
    const AttackReport r = cmd_run_all(cfg, paths, opt.force);
    std::fputs(render_report({r}, ReportFormat::text).c_str(), stdout);
    std::printf("report: %s\n", paths.report_txt().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "trains small vision transformers and runs a data-free attention-"
      "hijacking backdoor attack against them"};
  app.require_subcommand(1);

  Options opt;
  const char* stages[] = {"train-clean", "gen-trigger", "inject", "evaluate",
                          "run-all"};
  const char* blurbs[] = {
      "generate data and train the clean model",
      "optimize the trigger against the clean checkpoint",
      "fine-tune selected neurons on the poisoned surrogate",
      "score the attack and write the report files",
      "all four stages in order"};
  for (int i = 0; i < 5; ++i)
    add_stage_options(app.add_subcommand(stages[i], blurbs[i]), opt);

  CLI::App* report = app.add_subcommand(
      "report", "merge report CSV files into one text table");
  report->add_option("files", opt.report_files, "report CSV files")
      ->required();
  report->add_option("--out", opt.out, "also write the table to this file");
  report->add_flag("--force", opt.force, "overwrite an existing output file");

  CLI11_PARSE(app, argc, argv);

  const CLI::App* active = app.get_subcommands().front();
  const std::string stage = active->get_name();
  if (stage != "report")
    opt.seed_set = active->count("--seed") > 0;

  try {
    return run_stage(stage, opt);
  } catch (const vitbd::ValueError& e) {
    std::fprintf(stderr, "vitbd: [%s] %s\n", stage.c_str(), e.what());
    return 2;
  } catch (const vitbd::DimensionError& e) {
    std::fprintf(stderr, "vitbd: [%s] %s\n", stage.c_str(), e.what());
    return 2;
  } catch (const vitbd::FormatError& e) {
    std::fprintf(stderr, "vitbd: [%s] %s\n", stage.c_str(), e.what());
    return 3;
  } catch (const vitbd::IoError& e) {
    std::fprintf(stderr, "vitbd: [%s] %s\n", stage.c_str(), e.what());
    return 3;
  } catch (const vitbd::NumericError& e) {
    std::fprintf(stderr, "vitbd: [%s] %s\n", stage.c_str(), e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "vitbd: [%s] %s\n", stage.c_str(), e.what());
    return 1;
  }
}
