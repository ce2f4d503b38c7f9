#pragma once

#include <string>
#include <vector>

#include "vitbd/config.hpp"
#include "vitbd/metrics.hpp"
#include "vitbd/model.hpp"
#include "vitbd/trigger.hpp"

namespace vitbd {

// Canonical artifact locations under one run directory. Stages communicate
// through these files only; no in-process handoffs, so every stage can be
// re-run or tested on its own.
struct RunPaths {
  std::string root;

  std::string config() const { return root + "/config.json"; }
  std::string train_data() const { return root + "/data/train"; }
  std::string test_data() const { return root + "/data/test"; }
  std::string surrogate_data() const { return root + "/data/surrogate"; }
  std::string clean_ckpt() const { return root + "/clean.ckpt"; }
  std::string trigger_dir() const { return root + "/trigger"; }
  std::string loss_curve() const { return root + "/trigger/loss_curve.json"; }
  std::string trigger_preview() const { return root + "/trigger/preview.png"; }
  std::string backdoored_ckpt() const { return root + "/backdoored.ckpt"; }
  std::string inject_log() const { return root + "/inject_log.json"; }
  std::string report_csv() const { return root + "/report.csv"; }
  std::string report_json() const { return root + "/report.json"; }
  std::string report_txt() const { return root + "/report.txt"; }
};

// Run directory resolution: the explicit --out flag wins, then the
// VITBD_OUT_ROOT environment variable (a parent for run-<hash> directories),
// then the config's own out_dir, then ./runs/run-<hash>.
std::string resolve_out_dir(const ExperimentConfig& cfg,
                            const std::string& cli_out);

// Every stage validates the config, refuses to overwrite existing artifacts
// unless force is set, and writes through temp-file-plus-rename. All outputs
// embed the config hash.

// Generates the train/test datasets, trains the clean model, writes
// config.json alongside. Warns through the result, not an exception, when a
// configured holdout floor is missed.
TrainResult cmd_train_clean(const ExperimentConfig& cfg, const RunPaths& paths,
                            bool force);

// Generates the surrogate set, optimizes the trigger against the clean
// checkpoint, writes the trigger directory, loss curve and preview image.
TriggerGenResult cmd_gen_trigger(const ExperimentConfig& cfg,
                                 const RunPaths& paths, bool force);

// Builds the poisoned surrogate set, fine-tunes the selected neurons, writes
// the backdoored checkpoint and the injection log.
InjectionLog cmd_inject(const ExperimentConfig& cfg, const RunPaths& paths,
                        bool force);

// Measures CDA before/after, both attack success rates, AR and TPR, and
// writes report.{csv,json,txt}.
AttackReport cmd_evaluate(const ExperimentConfig& cfg, const RunPaths& paths,
                          bool force);

// Merges rows from report CSV files into one text table.
std::string cmd_report(const std::vector<std::string>& csv_paths);

// The four stages in order.
AttackReport cmd_run_all(const ExperimentConfig& cfg, const RunPaths& paths,
                         bool force);

}  // namespace vitbd
