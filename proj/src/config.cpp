#include "vitbd/config.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"

namespace vitbd {

namespace {

using nlohmann::json;

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// A typo in a config file must fail loudly, not run the defaults.
void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ValueError("config: " + where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known)
      throw ValueError("config: unknown key \"" + it.key() + "\" in " + where);
  }
}

std::uint64_t get_u64(const json& j, const char* key, std::uint64_t fallback,
                      const std::string& where) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer() ||
      (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ValueError("config: " + where + "." + key +
                     " must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

std::size_t get_size(const json& j, const char* key, std::size_t fallback,
                     const std::string& where) {
  return static_cast<std::size_t>(
      get_u64(j, key, static_cast<std::uint64_t>(fallback), where));
}

int get_int(const json& j, const char* key, int fallback,
            const std::string& where) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer())
    throw ValueError("config: " + where + "." + key + " must be an integer");
  return v.get<int>();
}

double get_double(const json& j, const char* key, double fallback,
                  const std::string& where) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number())
    throw ValueError("config: " + where + "." + key + " must be a number");
  return v.get<double>();
}

bool get_bool(const json& j, const char* key, bool fallback,
              const std::string& where) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_boolean())
    throw ValueError("config: " + where + "." + key + " must be a boolean");
  return v.get<bool>();
}

std::string get_string(const json& j, const char* key,
                       const std::string& fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_string())
    throw ValueError("config: " + where + "." + key + " must be a string");
  return v.get<std::string>();
}

json model_json(const ModelSpec& m) {
  json j;
  j["image_size"] = m.image_size;
  j["channels"] = m.channels;
  j["patch_size"] = m.patch_size;
  j["embed_dim"] = m.embed_dim;
  j["num_heads"] = m.num_heads;
  j["num_blocks"] = m.num_blocks;
  j["mlp_ratio"] = m.mlp_ratio;
  j["num_classes"] = m.num_classes;
  j["use_cls_token"] = m.use_cls_token;
  return j;
}

json data_json(const SyntheticConfig& d, std::size_t train_samples,
               std::size_t test_samples) {
  json j;
  j["family"] = d.family;
  j["num_classes"] = d.num_classes;
  j["image_size"] = d.image_size;
  j["channels"] = d.channels;
  j["noise"] = d.noise;
  j["train_samples"] = train_samples;
  j["test_samples"] = test_samples;
  return j;
}

json surrogate_json(const SyntheticConfig& d, const SurrogatePolicy& p) {
  json j;
  j["family"] = d.family;
  j["num_classes"] = d.num_classes;
  j["image_size"] = d.image_size;
  j["channels"] = d.channels;
  j["noise"] = d.noise;
  j["count"] = p.count;
  j["require_disjoint"] = p.require_disjoint;
  return j;
}

json train_json(const TrainConfig& t) {
  json j;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["lr"] = t.lr;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["holdout_fraction"] = t.holdout_fraction;
  j["min_holdout_cda"] = t.min_holdout_cda;
  return j;
}

json trigger_json(const TriggerPlacement& p, const TriggerGenConfig& g) {
  json j;
  j["height"] = p.height;
  j["width"] = p.width;
  j["row"] = p.row;
  j["col"] = p.col;
  j["block"] = g.block;
  j["lr"] = g.lr;
  j["epochs"] = g.epochs;
  j["threshold"] = g.threshold;
  j["batch_size"] = g.batch_size;
  return j;
}

json inject_json(const InjectConfig& i) {
  json j;
  j["block"] = i.block;
  j["neurons"] = i.neurons;
  j["tpr_cap"] = i.tpr_cap;
  j["mlp"] = i.layers.mlp;
  j["attn_proj"] = i.layers.attn_proj;
  j["epsilon"] = i.epsilon;
  j["lr"] = i.lr;
  j["epochs"] = i.epochs;
  j["batch_size"] = i.batch_size;
  j["asr_stop"] = i.asr_stop;
  j["zero_floor"] = i.zero_floor;
  return j;
}

// The hashed form. Sorted keys come free with the json object; out_dir and
// record_timing are deliberately absent, they change no computed number.
json canonical(const ExperimentConfig& cfg) {
  json j;
  j["model"] = model_json(cfg.model);
  j["data"] = data_json(cfg.data, cfg.train_samples, cfg.test_samples);
  j["surrogate"] = surrogate_json(cfg.surrogate_data, cfg.surrogate);
  j["train"] = train_json(cfg.train);
  j["trigger"] = trigger_json(cfg.trigger_place, cfg.trigger_gen);
  j["inject"] = inject_json(cfg.inject);
  j["target_label"] = cfg.target_label;
  j["seed"] = cfg.seed;
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  family_class_names(data.family);            // throws on an unknown family
  family_class_names(surrogate_data.family);

  if (static_cast<std::size_t>(data.image_size) != model.image_size ||
      static_cast<std::size_t>(data.channels) != model.channels)
    throw ValueError("config: data geometry must match the model input");
  if (static_cast<std::size_t>(data.num_classes) != model.num_classes)
    throw ValueError("config: data.num_classes must match model.num_classes");
  if (static_cast<std::size_t>(surrogate_data.image_size) != model.image_size ||
      static_cast<std::size_t>(surrogate_data.channels) != model.channels)
    throw ValueError("config: surrogate geometry must match the model input");

  if (train_samples == 0 || test_samples == 0)
    throw ValueError("config: sample counts must be positive");
  if (surrogate.count == 0)
    throw ValueError("config: surrogate.count must be positive");
  if (target_label < 0 || target_label >= data.num_classes)
    throw ValueError("config: target_label outside the class range");

  if (surrogate.require_disjoint) {
    const auto main_names = family_class_names(data.family);
    const auto sur_names = family_class_names(surrogate_data.family);
    for (int c = 0; c < surrogate_data.num_classes &&
                    c < static_cast<int>(sur_names.size());
         ++c)
      if (std::find(main_names.begin(), main_names.end(), sur_names[c]) !=
          main_names.end())
        throw ValueError("config: surrogate class '" + sur_names[c] +
                         "' overlaps the main task");
  }

  if (trigger_place.height <= 0 || trigger_place.width <= 0 ||
      trigger_place.height > data.image_size ||
      trigger_place.width > data.image_size)
    throw ValueError("config: trigger does not fit the image");
  if (inject.epsilon <= 0.0)
    throw ValueError("config: inject.epsilon must be positive");
  if (inject.neurons == 0 && !(inject.tpr_cap > 0.0))
    throw ValueError("config: inject needs neurons > 0 or a positive tpr_cap");
}

std::string canonical_json(const ExperimentConfig& cfg) {
  return canonical(cfg).dump();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64(canonical_json(cfg));
}

std::string config_hash_hex(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  return std::string(buf);
}

std::string experiment_to_json(const ExperimentConfig& cfg) {
  json j = canonical(cfg);
  j["out_dir"] = cfg.out_dir;
  j["record_timing"] = cfg.record_timing;
  return j.dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      std::string("config json: ") + e.what());
  }

  check_keys(j, "config",
             {"model", "data", "surrogate", "train", "trigger", "inject",
              "target_label", "seed", "out_dir", "record_timing"});

  ExperimentConfig cfg;

  const json jm = j.value("model", json::object());
  check_keys(jm, "model",
             {"image_size", "channels", "patch_size", "embed_dim", "num_heads",
              "num_blocks", "mlp_ratio", "num_classes", "use_cls_token"});
  ModelSpec& m = cfg.model;
  m.image_size = get_size(jm, "image_size", m.image_size, "model");
  m.channels = get_size(jm, "channels", m.channels, "model");
  m.patch_size = get_size(jm, "patch_size", m.patch_size, "model");
  m.embed_dim = get_size(jm, "embed_dim", m.embed_dim, "model");
  m.num_heads = get_size(jm, "num_heads", m.num_heads, "model");
  m.num_blocks = get_size(jm, "num_blocks", m.num_blocks, "model");
  m.mlp_ratio = get_size(jm, "mlp_ratio", m.mlp_ratio, "model");
  m.num_classes = get_size(jm, "num_classes", m.num_classes, "model");
  m.use_cls_token = get_bool(jm, "use_cls_token", m.use_cls_token, "model");

  // Main-task geometry defaults to the model input so it is stated once.
  const json jd = j.value("data", json::object());
  check_keys(jd, "data",
             {"family", "num_classes", "image_size", "channels", "noise",
              "train_samples", "test_samples"});
  SyntheticConfig& d = cfg.data;
  d.family = get_string(jd, "family", d.family, "data");
  d.num_classes =
      get_int(jd, "num_classes", static_cast<int>(m.num_classes), "data");
  d.image_size =
      get_int(jd, "image_size", static_cast<int>(m.image_size), "data");
  d.channels = get_int(jd, "channels", static_cast<int>(m.channels), "data");
  d.noise = get_double(jd, "noise", d.noise, "data");
  cfg.train_samples =
      get_size(jd, "train_samples", cfg.train_samples, "data");
  cfg.test_samples = get_size(jd, "test_samples", cfg.test_samples, "data");

  const json js = j.value("surrogate", json::object());
  check_keys(js, "surrogate",
             {"family", "num_classes", "image_size", "channels", "noise",
              "count", "require_disjoint"});
  SyntheticConfig& s = cfg.surrogate_data;
  s.family = get_string(js, "family", s.family, "surrogate");
  s.num_classes = get_int(js, "num_classes", s.num_classes, "surrogate");
  s.image_size =
      get_int(js, "image_size", static_cast<int>(m.image_size), "surrogate");
  s.channels =
      get_int(js, "channels", static_cast<int>(m.channels), "surrogate");
  s.noise = get_double(js, "noise", s.noise, "surrogate");
  cfg.surrogate.count = get_size(js, "count", cfg.surrogate.count, "surrogate");
  cfg.surrogate.require_disjoint = get_bool(
      js, "require_disjoint", cfg.surrogate.require_disjoint, "surrogate");
  cfg.surrogate.source_name = s.family;

  const json jt = j.value("train", json::object());
  check_keys(jt, "train",
             {"epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps",
              "holdout_fraction", "min_holdout_cda"});
  TrainConfig& t = cfg.train;
  t.epochs = get_size(jt, "epochs", t.epochs, "train");
  t.batch_size = get_size(jt, "batch_size", t.batch_size, "train");
  t.lr = get_double(jt, "lr", t.lr, "train");
  t.beta1 = get_double(jt, "beta1", t.beta1, "train");
  t.beta2 = get_double(jt, "beta2", t.beta2, "train");
  t.adam_eps = get_double(jt, "adam_eps", t.adam_eps, "train");
  t.holdout_fraction =
      get_double(jt, "holdout_fraction", t.holdout_fraction, "train");
  t.min_holdout_cda =
      get_double(jt, "min_holdout_cda", t.min_holdout_cda, "train");

  const json jg = j.value("trigger", json::object());
  check_keys(jg, "trigger",
             {"height", "width", "row", "col", "block", "lr", "epochs",
              "threshold", "batch_size"});
  TriggerPlacement& p = cfg.trigger_place;
  p.height = get_int(jg, "height", p.height, "trigger");
  p.width = get_int(jg, "width", p.width, "trigger");
  p.row = get_int(jg, "row", p.row, "trigger");
  p.col = get_int(jg, "col", p.col, "trigger");
  TriggerGenConfig& g = cfg.trigger_gen;
  g.block = get_int(jg, "block", g.block, "trigger");
  g.lr = get_double(jg, "lr", g.lr, "trigger");
  g.epochs = get_int(jg, "epochs", g.epochs, "trigger");
  g.threshold = get_double(jg, "threshold", g.threshold, "trigger");
  g.batch_size = get_size(jg, "batch_size", g.batch_size, "trigger");

  const json ji = j.value("inject", json::object());
  check_keys(ji, "inject",
             {"block", "neurons", "tpr_cap", "mlp", "attn_proj", "epsilon",
              "lr", "epochs", "batch_size", "asr_stop", "zero_floor"});
  InjectConfig& i = cfg.inject;
  i.block = get_int(ji, "block", i.block, "inject");
  i.neurons = get_size(ji, "neurons", i.neurons, "inject");
  i.tpr_cap = get_double(ji, "tpr_cap", i.tpr_cap, "inject");
  i.layers.mlp = get_bool(ji, "mlp", i.layers.mlp, "inject");
  i.layers.attn_proj = get_bool(ji, "attn_proj", i.layers.attn_proj, "inject");
  i.epsilon = get_double(ji, "epsilon", i.epsilon, "inject");
  i.lr = get_double(ji, "lr", i.lr, "inject");
  i.epochs = get_size(ji, "epochs", i.epochs, "inject");
  i.batch_size = get_size(ji, "batch_size", i.batch_size, "inject");
  i.asr_stop = get_double(ji, "asr_stop", i.asr_stop, "inject");
  i.zero_floor = get_double(ji, "zero_floor", i.zero_floor, "inject");

  cfg.target_label = get_int(j, "target_label", cfg.target_label, "config");
  cfg.seed = get_u64(j, "seed", cfg.seed, "config");
  cfg.out_dir = get_string(j, "out_dir", cfg.out_dir, "config");
  cfg.record_timing =
      get_bool(j, "record_timing", cfg.record_timing, "config");

  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
  return experiment_from_json(read_binary_file(path));
}

void save_experiment(const ExperimentConfig& cfg, const std::string& path) {
  write_file_atomic(path, experiment_to_json(cfg));
}

}  // namespace vitbd
