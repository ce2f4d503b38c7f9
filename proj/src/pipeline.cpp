#include "vitbd/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include "vitbd/data.hpp"
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"
#include "vitbd/image_io.hpp"
#include "vitbd/inject.hpp"
#include "vitbd/rng.hpp"

namespace vitbd {

namespace {

using nlohmann::json;

void guard(const std::string& path, bool force) {
  if (!force && file_exists(path))
    throw IoError("artifact already exists: " + path +
                  " (pass --force to overwrite)");
}

// JSON has no infinity literal; the few fields that can hold one round-trip
// through a string sentinel.
json json_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double num_from(const json& v, const std::string& what) {
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    if (s == "nan") return NAN;
    throw FormatError(FormatError::Kind::bad_content,
                      what + ": unrecognized numeric sentinel \"" + s + "\"");
  }
  if (!v.is_number())
    throw FormatError(FormatError::Kind::bad_content, what + ": not a number");
  return v.get<double>();
}

json parse_artifact(const std::string& path, const std::string& what) {
  try {
    return json::parse(read_binary_file(path));
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      what + " is not valid JSON: " + path + ": " + e.what());
  }
}

// Held-out poisoned samples monitor the attack success rate during injection
// and score ASR-SurD afterwards; the rest is the tuning set. Degenerate
// single-sample sets monitor what they train on.
std::pair<LabeledDataset, LabeledDataset> poison_split(
    const LabeledDataset& poisoned, std::uint64_t seed) {
  const std::size_t n = poisoned.size();
  if (n < 2) return {poisoned, poisoned};
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx.data(), idx.size());
  const std::size_t k_mon = std::max<std::size_t>(1, n / 10);
  const std::vector<std::size_t> mon(idx.begin(), idx.begin() + k_mon);
  const std::vector<std::size_t> tune(idx.begin() + k_mon, idx.end());
  LabeledDataset tune_set = poisoned.subset(tune);
  tune_set.split = "poison-tune";
  LabeledDataset mon_set = poisoned.subset(mon);
  mon_set.split = "poison-monitor";
  return {std::move(tune_set), std::move(mon_set)};
}

// The trigger pattern over a mid-gray background; channel mean when the
// image is neither grayscale nor RGB.
Tensor preview_image(const TriggerSpec& trig) {
  const auto& ps = trig.pattern.shape();
  const std::size_t c = ps[0], h = ps[1], w = ps[2];
  const auto mv = trig.mask.values();
  const auto pv = trig.pattern.values();
  if (c == 3) {
    std::vector<double> out(3 * h * w);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < h * w; ++i)
        out[ch * h * w + i] = mv[i] > 0.5 ? pv[ch * h * w + i] : 0.5;
    return Tensor::from_data({3, h, w}, std::move(out));
  }
  std::vector<double> out(h * w, 0.5);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (mv[i] <= 0.5) continue;
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) acc += pv[ch * h * w + i];
    out[i] = acc / static_cast<double>(c);
  }
  return Tensor::from_data({h, w}, std::move(out));
}

LabeledDataset build_main_split(const ExperimentConfig& cfg, std::size_t n,
                                const char* tag, const char* split) {
  LabeledDataset ds = gen_synthetic(cfg.data, n, derive_seed(cfg.seed, tag));
  ds.split = split;
  return ds;
}

}  // namespace

std::string resolve_out_dir(const ExperimentConfig& cfg,
                            const std::string& cli_out) {
  if (!cli_out.empty()) return cli_out;
  const char* root = std::getenv("VITBD_OUT_ROOT");
  if (root != nullptr && root[0] != '\0')
    return std::string(root) + "/run-" + config_hash_hex(cfg);
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  return "runs/run-" + config_hash_hex(cfg);
}

TrainResult cmd_train_clean(const ExperimentConfig& cfg, const RunPaths& paths,
                            bool force) {
  cfg.validate();
  const std::string hash = config_hash_hex(cfg);
  guard(paths.config(), force);
  guard(paths.train_data() + "/meta.json", force);
  guard(paths.test_data() + "/meta.json", force);
  guard(paths.clean_ckpt(), force);

  ensure_dir(paths.root);
  save_experiment(cfg, paths.config());

  const LabeledDataset train_set =
      build_main_split(cfg, cfg.train_samples, "main-data", "train");
  const LabeledDataset test_set =
      build_main_split(cfg, cfg.test_samples, "test-data", "test");
  export_raw(train_set, paths.train_data(), hash);
  export_raw(test_set, paths.test_data(), hash);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, "train");
  TrainResult res = train_clean(cfg.model, train_set, tc);
  res.checkpoint.meta().config_hash = hash;
  save_checkpoint(res.checkpoint, paths.clean_ckpt());
  return res;
}

TriggerGenResult cmd_gen_trigger(const ExperimentConfig& cfg,
                                 const RunPaths& paths, bool force) {
  cfg.validate();
  const std::string hash = config_hash_hex(cfg);
  guard(paths.surrogate_data() + "/meta.json", force);
  guard(paths.trigger_dir() + "/meta.json", force);
  guard(paths.loss_curve(), force);
  guard(paths.trigger_preview(), force);

  const Checkpoint clean = load_checkpoint(paths.clean_ckpt());

  LabeledDataset pool = gen_synthetic(cfg.surrogate_data, cfg.surrogate.count,
                                      derive_seed(cfg.seed, "surrogate-data"));
  SurrogatePolicy policy = cfg.surrogate;
  policy.source_name = cfg.surrogate_data.family;
  const LabeledDataset surrogate =
      make_surrogate(pool, policy, family_class_names(cfg.data.family),
                     derive_seed(cfg.seed, "surrogate-pick"));
  export_raw(surrogate, paths.surrogate_data(), hash);

  TriggerGenConfig gc = cfg.trigger_gen;
  gc.seed = derive_seed(cfg.seed, "trigger");
  TriggerGenResult res =
      generate_trigger(clean, surrogate, gc, cfg.trigger_place);

  save_trigger(res.trigger, paths.trigger_dir(), hash);

  json lc;
  lc["config_hash"] = hash;
  lc["ar_initial"] = json_num(res.ar_initial);
  lc["ar_final"] = json_num(res.ar_final);
  lc["loss"] = res.loss_history;
  write_file_atomic(paths.loss_curve(), lc.dump(2) + "\n");

  write_png(paths.trigger_preview(), preview_image(res.trigger),
            {{"config_hash", hash}});
  return res;
}

InjectionLog cmd_inject(const ExperimentConfig& cfg, const RunPaths& paths,
                        bool force) {
  cfg.validate();
  const std::string hash = config_hash_hex(cfg);
  guard(paths.backdoored_ckpt(), force);
  guard(paths.inject_log(), force);

  const Checkpoint clean = load_checkpoint(paths.clean_ckpt());
  const TriggerSpec trig = load_trigger(paths.trigger_dir());
  const LabeledDataset surrogate = load_raw(paths.surrogate_data());

  const LabeledDataset poisoned =
      build_poisoned_dataset(surrogate, trig, cfg.target_label);
  const auto [tune_set, monitor] =
      poison_split(poisoned, derive_seed(cfg.seed, "poison-split"));

  InjectConfig ic = cfg.inject;
  ic.seed = derive_seed(cfg.seed, "inject");
  InjectResult res = inject(clean, tune_set, ic, &monitor);
  if (!cfg.record_timing) res.log.inject_seconds = 0.0;

  res.model.meta().config_hash = hash;
  save_checkpoint(res.model, paths.backdoored_ckpt());

  json lj = json::parse(res.log.to_json());
  lj["config_hash"] = hash;
  write_file_atomic(paths.inject_log(), lj.dump(2) + "\n");
  return res.log;
}

AttackReport cmd_evaluate(const ExperimentConfig& cfg, const RunPaths& paths,
                          bool force) {
  cfg.validate();
  const std::string hash = config_hash_hex(cfg);
  guard(paths.report_csv(), force);
  guard(paths.report_json(), force);
  guard(paths.report_txt(), force);

  const Checkpoint clean = load_checkpoint(paths.clean_ckpt());
  const Checkpoint backdoored = load_checkpoint(paths.backdoored_ckpt());
  const TriggerSpec trig = load_trigger(paths.trigger_dir());
  const LabeledDataset test_set = load_raw(paths.test_data());
  const LabeledDataset surrogate = load_raw(paths.surrogate_data());

  AttackReport r;
  r.label = "dbia";
  r.config_hash = hash;
  r.cda_before = cda(clean, test_set);
  r.cda_after = cda(backdoored, test_set);

  // Success on poisoned surrogate images the tuning never saw.
  const LabeledDataset poisoned =
      build_poisoned_dataset(surrogate, trig, cfg.target_label);
  const auto [tune_set, monitor] =
      poison_split(poisoned, derive_seed(cfg.seed, "poison-split"));
  (void)tune_set;
  r.asr_surd = asr(backdoored, monitor, cfg.target_label, false);

  // Success on the real task: stamped test images whose true class is not
  // already the target.
  const LabeledDataset stamped =
      build_poisoned_dataset(test_set, trig, cfg.target_label);
  r.asr_reld = asr(backdoored, stamped, cfg.target_label, true);

  const json lc = parse_artifact(paths.loss_curve(), "loss curve");
  const json lj = parse_artifact(paths.inject_log(), "injection log");
  try {
    r.ar = num_from(lc.at("ar_final"), "loss curve ar_final");
    r.tpr = num_from(lj.at("tpr"), "injection log tpr");
    r.inject_seconds =
        num_from(lj.at("inject_seconds"), "injection log inject_seconds");
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      std::string("stage artifact incomplete: ") + e.what());
  }

  const std::vector<AttackReport> rows{r};
  write_file_atomic(paths.report_csv(), render_report(rows, ReportFormat::csv));
  write_file_atomic(paths.report_json(),
                    render_report(rows, ReportFormat::json));
  write_file_atomic(paths.report_txt(),
                    render_report(rows, ReportFormat::text));
  return r;
}

std::string cmd_report(const std::vector<std::string>& csv_paths) {
  if (csv_paths.empty()) throw ValueError("report: no input files");
  std::vector<AttackReport> rows;
  for (const std::string& path : csv_paths) {
    const std::vector<AttackReport> part =
        parse_report_csv(read_binary_file(path));
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return render_report(rows, ReportFormat::text);
}

AttackReport cmd_run_all(const ExperimentConfig& cfg, const RunPaths& paths,
                         bool force) {
  cmd_train_clean(cfg, paths, force);
  cmd_gen_trigger(cfg, paths, force);
  cmd_inject(cfg, paths, force);
  return cmd_evaluate(cfg, paths, force);
}

}  // namespace vitbd
