#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitbd/config.hpp"
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"
#include "vitbd/pipeline.hpp"

using namespace vitbd;
namespace fs = std::filesystem;

namespace {

std::string temp_root(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vitbd-pipe-" + name);
  fs::remove_all(p);
  return p.string();
}

// Small enough that a full pipeline run takes well under a second.
ExperimentConfig tiny_config() {
  ExperimentConfig cfg = experiment_from_json("{}");
  cfg.model.image_size = 16;
  cfg.model.embed_dim = 8;
  cfg.model.num_heads = 2;
  cfg.model.num_blocks = 2;
  cfg.model.mlp_ratio = 2;
  cfg.data.image_size = 16;
  cfg.surrogate_data.image_size = 16;
  cfg.train_samples = 32;
  cfg.test_samples = 16;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 16;
  cfg.surrogate.count = 20;
  cfg.trigger_gen.epochs = 3;
  cfg.trigger_gen.lr = 0.5;
  cfg.inject.neurons = 4;
  cfg.inject.epochs = 2;
  cfg.inject.lr = 0.5;
  cfg.inject.batch_size = 8;
  cfg.seed = 11;
  cfg.record_timing = false;
  return cfg;
}

std::map<std::string, std::string> tree_bytes(const std::string& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    out[fs::relative(e.path(), root).string()] =
        read_binary_file(e.path().string());
  }
  return out;
}

nlohmann::json parse_file(const std::string& path) {
  return nlohmann::json::parse(read_binary_file(path));
}

struct RunFixture {
  ExperimentConfig cfg;
  RunPaths paths;
  AttackReport report;
  std::string hash;
};

// One shared full run; cases that only inspect artifacts reuse it.
const RunFixture& tiny_run() {
  static const RunFixture fx = [] {
    RunFixture f;
    f.cfg = tiny_config();
    f.paths.root = temp_root("main");
    f.report = cmd_run_all(f.cfg, f.paths, false);
    f.hash = config_hash_hex(f.cfg);
    return f;
  }();
  return fx;
}

}  // namespace

TEST_CASE("an empty config parses to the documented defaults") {
  const ExperimentConfig cfg = experiment_from_json("{}");
  CHECK(cfg.model == ModelSpec{});
  CHECK(cfg.data.family == "geometric");
  CHECK(cfg.data.num_classes == 4);
  CHECK(cfg.data.image_size == 32);
  CHECK(cfg.data.channels == 3);
  CHECK(cfg.surrogate_data.family == "texture");
  CHECK(cfg.surrogate.count == 2000);
  CHECK(cfg.surrogate.require_disjoint);
  CHECK(cfg.surrogate.source_name == "texture");
  CHECK(cfg.train_samples == 4096);
  CHECK(cfg.test_samples == 1024);
  CHECK(cfg.train == TrainConfig{});
  CHECK(cfg.trigger_place == TriggerPlacement{});
  CHECK(cfg.trigger_gen == TriggerGenConfig{});
  CHECK(cfg.inject == InjectConfig{});
  CHECK(cfg.inject.epsilon == 2.0);
  CHECK(cfg.inject.tpr_cap == 0.06);
  CHECK(cfg.target_label == 0);
  CHECK(cfg.seed == 0);
  CHECK(cfg.out_dir.empty());
  CHECK(cfg.record_timing);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("geometry stated once on the model flows into both datasets") {
  const ExperimentConfig cfg = experiment_from_json(R"({
    "model": {"image_size": 16, "embed_dim": 8, "num_heads": 2,
              "num_blocks": 1, "num_classes": 3, "channels": 1}
  })");
  CHECK(cfg.data.image_size == 16);
  CHECK(cfg.data.channels == 1);
  CHECK(cfg.data.num_classes == 3);
  CHECK(cfg.surrogate_data.image_size == 16);
  CHECK(cfg.surrogate_data.channels == 1);
  // Surrogate classes are independent of the main task.
  CHECK(cfg.surrogate_data.num_classes == 4);
}

TEST_CASE("config json round trips exactly") {
  const std::string text = R"({
    "model": {"image_size": 16, "channels": 1, "patch_size": 8,
              "embed_dim": 8, "num_heads": 2, "num_blocks": 2,
              "mlp_ratio": 2, "num_classes": 4, "use_cls_token": false},
    "data": {"family": "geometric", "num_classes": 4, "image_size": 16,
             "channels": 1, "noise": 0.1, "train_samples": 64,
             "test_samples": 32},
    "surrogate": {"family": "texture", "num_classes": 3, "image_size": 16,
                  "channels": 1, "noise": 0.02, "count": 50,
                  "require_disjoint": true},
    "train": {"epochs": 5, "batch_size": 8, "lr": 0.01, "beta1": 0.8,
              "beta2": 0.99, "adam_eps": 1e-7, "holdout_fraction": 0.2,
              "min_holdout_cda": 0.4},
    "trigger": {"height": 8, "width": 8, "row": 0, "col": 0, "block": 1,
                "lr": 2.0, "epochs": 40, "threshold": 0.01, "batch_size": 10},
    "inject": {"block": 0, "neurons": 6, "tpr_cap": 0.05, "mlp": true,
               "attn_proj": true, "epsilon": 1.5, "lr": 0.3, "epochs": 7,
               "batch_size": 16, "asr_stop": 0.95, "zero_floor": 0.001},
    "target_label": 2,
    "seed": 99,
    "out_dir": "some/dir",
    "record_timing": false
  })";
  const ExperimentConfig cfg = experiment_from_json(text);
  CHECK(cfg.inject.layers.attn_proj);
  CHECK(cfg.trigger_gen.block == 1);
  CHECK(cfg.target_label == 2);
  CHECK_FALSE(cfg.model.use_cls_token);

  const ExperimentConfig again = experiment_from_json(experiment_to_json(cfg));
  CHECK(again == cfg);

  const std::string path = temp_root("roundtrip") + "/config.json";
  ensure_dir(temp_root("roundtrip"));
  save_experiment(cfg, path);
  CHECK(load_experiment(path) == cfg);
}

TEST_CASE("typos and wrong types in the config fail loudly") {
  CHECK_THROWS_AS(experiment_from_json(R"({"trian": {}})"), ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"inject": {"neuron": 4}})"),
                  ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"train": {"epochs": "ten"}})"),
                  ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"train": {"epochs": -3}})"),
                  ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"train": 7})"), ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"seed": -1})"), ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"record_timing": "yes"})"),
                  ValueError);
  CHECK_THROWS_AS(experiment_from_json("{not json"), FormatError);
  CHECK_THROWS_AS(load_experiment(temp_root("absent") + "/missing.json"),
                  IoError);
}

TEST_CASE("the hash ignores output knobs and tracks every experiment knob") {
  ExperimentConfig cfg = experiment_from_json("{}");
  const std::uint64_t h0 = config_hash(cfg);

  cfg.out_dir = "/somewhere/else";
  cfg.record_timing = false;
  CHECK(config_hash(cfg) == h0);
  CHECK(canonical_json(cfg).find("out_dir") == std::string::npos);
  CHECK(canonical_json(cfg).find("record_timing") == std::string::npos);

  ExperimentConfig c1 = cfg;
  c1.seed = 1;
  CHECK(config_hash(c1) != h0);
  ExperimentConfig c2 = cfg;
  c2.inject.lr *= 2.0;
  CHECK(config_hash(c2) != h0);
  ExperimentConfig c3 = cfg;
  c3.trigger_place.width = 4;
  CHECK(config_hash(c3) != h0);
  ExperimentConfig c4 = cfg;
  c4.model.embed_dim = 32;
  CHECK(config_hash(c4) != h0);
  ExperimentConfig c5 = cfg;
  c5.target_label = 1;
  CHECK(config_hash(c5) != h0);

  const std::string hex = config_hash_hex(cfg);
  CHECK(hex.size() == 16);
  for (const char c : hex)
    CHECK(((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f')));
}

TEST_CASE("config validation catches cross-module inconsistencies") {
  ExperimentConfig base = experiment_from_json("{}");

  ExperimentConfig c = base;
  c.data.image_size = 16;
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.data.num_classes = 3;
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.surrogate_data.channels = 1;
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.target_label = 4;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c.target_label = -1;
  CHECK_THROWS_AS(c.validate(), ValueError);

  // Same family on both sides only passes once disjointness is waived.
  c = base;
  c.surrogate_data.family = "geometric";
  c.surrogate.source_name = "geometric";
  CHECK_THROWS_AS(c.validate(), ValueError);
  c.surrogate.require_disjoint = false;
  CHECK_NOTHROW(c.validate());

  c = base;
  c.data.family = "no-such-family";
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.trigger_place.height = 40;
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.inject.epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.inject.neurons = 0;
  c.inject.tpr_cap = 0.0;
  CHECK_THROWS_AS(c.validate(), ValueError);

  c = base;
  c.train_samples = 0;
  CHECK_THROWS_AS(c.validate(), ValueError);
}

TEST_CASE("run directory resolution prefers flag, then env root, then config") {
  ExperimentConfig cfg = experiment_from_json("{}");
  cfg.out_dir = "cfg-dir";
  const std::string hex = config_hash_hex(cfg);

  unsetenv("VITBD_OUT_ROOT");
  CHECK(resolve_out_dir(cfg, "cli-dir") == "cli-dir");
  CHECK(resolve_out_dir(cfg, "") == "cfg-dir");

  setenv("VITBD_OUT_ROOT", "/env-root", 1);
  CHECK(resolve_out_dir(cfg, "cli-dir") == "cli-dir");
  CHECK(resolve_out_dir(cfg, "") == "/env-root/run-" + hex);
  unsetenv("VITBD_OUT_ROOT");

  cfg.out_dir.clear();
  CHECK(resolve_out_dir(cfg, "") == "runs/run-" + hex);
}

TEST_CASE("a zero-epoch pipeline is a no-op chain with a zero-delta report") {
  ExperimentConfig cfg = tiny_config();
  cfg.train.epochs = 0;
  cfg.trigger_gen.epochs = 0;
  cfg.inject.epochs = 0;
  const RunPaths paths{temp_root("noop")};

  const AttackReport r = cmd_run_all(cfg, paths, false);
  CHECK(r.cda_after == r.cda_before);
  CHECK(r.inject_seconds == 0.0);

  // Nothing trained, nothing tuned: both checkpoints are the same bytes.
  CHECK(read_binary_file(paths.clean_ckpt()) ==
        read_binary_file(paths.backdoored_ckpt()));

  const nlohmann::json lc = parse_file(paths.loss_curve());
  CHECK(lc.at("loss").empty());
  CHECK(lc.at("ar_initial") == lc.at("ar_final"));

  const nlohmann::json lj = parse_file(paths.inject_log());
  CHECK(lj.at("epoch_loss").empty());
  CHECK(lj.at("tuned_scalars").get<std::size_t>() > 0);
}

TEST_CASE("every stage artifact embeds the config hash") {
  const RunFixture& fx = tiny_run();
  const std::string& h = fx.hash;

  CHECK(parse_file(fx.paths.clean_ckpt() + ".json")
            .at("meta").at("config_hash") == h);
  CHECK(parse_file(fx.paths.backdoored_ckpt() + ".json")
            .at("meta").at("config_hash") == h);
  CHECK(parse_file(fx.paths.trigger_dir() + "/meta.json")
            .at("config_hash") == h);
  CHECK(parse_file(fx.paths.loss_curve()).at("config_hash") == h);
  CHECK(parse_file(fx.paths.inject_log()).at("config_hash") == h);
  CHECK(parse_file(fx.paths.train_data() + "/meta.json")
            .at("config_hash") == h);
  CHECK(parse_file(fx.paths.test_data() + "/meta.json")
            .at("config_hash") == h);
  CHECK(parse_file(fx.paths.surrogate_data() + "/meta.json")
            .at("config_hash") == h);
  CHECK(parse_file(fx.paths.report_json()).at(0).at("config_hash") == h);
  CHECK(read_binary_file(fx.paths.report_csv()).find(h) != std::string::npos);

  // The preview PNG carries the hash in a tEXt chunk.
  const std::string png = read_binary_file(fx.paths.trigger_preview());
  CHECK(png.find("config_hash") != std::string::npos);
  CHECK(png.find(h) != std::string::npos);

  // The config snapshot reparses to the exact config that ran.
  CHECK(load_experiment(fx.paths.config()) == fx.cfg);

  // Loaded report row agrees with the in-process result.
  const std::vector<AttackReport> rows =
      parse_report_csv(read_binary_file(fx.paths.report_csv()));
  REQUIRE(rows.size() == 1);
  CHECK(rows[0] == fx.report);
}

TEST_CASE("two runs of one config are bit-identical, a new seed is not") {
  const RunFixture& fx = tiny_run();
  const RunPaths again{temp_root("again")};
  cmd_run_all(fx.cfg, again, false);
  CHECK(tree_bytes(fx.paths.root) == tree_bytes(again.root));

  ExperimentConfig reseeded = fx.cfg;
  reseeded.seed += 1;
  const RunPaths other{temp_root("reseeded")};
  cmd_run_all(reseeded, other, false);
  CHECK(read_binary_file(other.clean_ckpt()) !=
        read_binary_file(fx.paths.clean_ckpt()));
}

TEST_CASE("existing artifacts are never overwritten without force") {
  const RunFixture& fx = tiny_run();
  CHECK_THROWS_AS(cmd_train_clean(fx.cfg, fx.paths, false), IoError);
  CHECK_THROWS_AS(cmd_gen_trigger(fx.cfg, fx.paths, false), IoError);
  CHECK_THROWS_AS(cmd_inject(fx.cfg, fx.paths, false), IoError);
  CHECK_THROWS_AS(cmd_evaluate(fx.cfg, fx.paths, false), IoError);

  // A forced rerun is idempotent down to the bytes.
  const auto before = tree_bytes(fx.paths.root);
  cmd_run_all(fx.cfg, fx.paths, true);
  CHECK(tree_bytes(fx.paths.root) == before);
}

TEST_CASE("stages demand their prerequisite artifacts") {
  const ExperimentConfig cfg = tiny_config();
  const RunPaths empty{temp_root("empty")};
  ensure_dir(empty.root);
  CHECK_THROWS_AS(cmd_gen_trigger(cfg, empty, false), IoError);
  CHECK_THROWS_AS(cmd_inject(cfg, empty, false), IoError);
  CHECK_THROWS_AS(cmd_evaluate(cfg, empty, false), IoError);
}

TEST_CASE("report merging concatenates rows and rejects garbage") {
  const RunFixture& fx = tiny_run();
  const std::string dir = temp_root("reports");
  ensure_dir(dir);

  AttackReport other = fx.report;
  other.label = "ablation";
  write_file_atomic(dir + "/other.csv",
                    render_report({other}, ReportFormat::csv));

  const std::string table =
      cmd_report({fx.paths.report_csv(), dir + "/other.csv"});
  CHECK(table.find("dbia") != std::string::npos);
  CHECK(table.find("ablation") != std::string::npos);

  std::size_t lines = 0;
  for (const char c : table)
    if (c == '\n') ++lines;
  CHECK(lines == 3);  // header + two rows

  CHECK_THROWS_AS(cmd_report({}), ValueError);
  CHECK_THROWS_AS(cmd_report({dir + "/missing.csv"}), IoError);
  write_file_atomic(dir + "/garbage.csv", "nope\n1,2\n");
  CHECK_THROWS_AS(cmd_report({dir + "/garbage.csv"}), FormatError);
}
