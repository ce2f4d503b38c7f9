#include "vitbd/trigger.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "vitbd/bytes.hpp"
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"
#include "vitbd/image_io.hpp"
#include "vitbd/rng.hpp"
#include "vitbd/trigger_spec.hpp"

namespace vitbd {

double TriggerSpec::area_fraction() const {
  const auto& s = mask.shape();
  double total = 0.0;
  for (const double v : mask.values()) total += v;
  return total / static_cast<double>(s[0] * s[1]);
}

void TriggerSpec::validate() const {
  if (mask.rank() != 2)
    throw DimensionError("trigger mask must be [h,w]");
  if (pattern.rank() != 3)
    throw DimensionError("trigger pattern must be [c,h,w]");
  const auto& ms = mask.shape();
  const auto& ps = pattern.shape();
  if (ps[1] != ms[0] || ps[2] != ms[1])
    throw DimensionError("trigger pattern and mask disagree on image size");
  for (const double v : mask.values())
    if (v != 0.0 && v != 1.0)
      throw ValueError("trigger mask entries must be exactly 0 or 1");
  for (const double v : pattern.values())
    if (!(v >= 0.0 && v <= 1.0))
      throw ValueError("trigger pattern values must lie in [0,1]");
}

TriggerSpec make_trigger(int image_size, int channels,
                         const TriggerPlacement& place, std::uint64_t seed) {
  if (image_size <= 0 || channels <= 0)
    throw ValueError("make_trigger: bad image geometry");
  if (place.height <= 0 || place.width <= 0 || place.height > image_size ||
      place.width > image_size)
    throw ValueError("make_trigger: trigger does not fit the image");
  TriggerPlacement resolved = place;
  if (resolved.row < 0) resolved.row = image_size - resolved.height;
  if (resolved.col < 0) resolved.col = image_size - resolved.width;
  if (resolved.row + resolved.height > image_size ||
      resolved.col + resolved.width > image_size)
    throw ValueError("make_trigger: trigger does not fit the image");

  const std::size_t hw = static_cast<std::size_t>(image_size);
  Tensor mask = Tensor::zeros({hw, hw});
  auto mv = mask.raw_values();
  for (int r = 0; r < resolved.height; ++r)
    for (int c = 0; c < resolved.width; ++c)
      mv[static_cast<std::size_t>(resolved.row + r) * hw +
         static_cast<std::size_t>(resolved.col + c)] = 1.0;

  Tensor pattern = Tensor::zeros({static_cast<std::size_t>(channels), hw, hw});
  Rng rng(derive_seed(seed, "trigger-pattern"));
  for (double& v : pattern.raw_values()) v = rng.uniform();
  return {mask, pattern, resolved};
}

std::vector<std::uint8_t> trigger_token_flags(const Tensor& mask,
                                              int patch_size) {
  if (mask.rank() != 2)
    throw DimensionError("trigger mask must be [h,w]");
  const auto& s = mask.shape();
  const std::size_t p = static_cast<std::size_t>(patch_size);
  if (patch_size <= 0 || s[0] % p != 0 || s[1] % p != 0)
    throw ValueError("trigger_token_flags: patch size does not tile the mask");
  const std::size_t grid_h = s[0] / p;
  const std::size_t grid_w = s[1] / p;
  const auto mv = mask.values();
  std::vector<std::uint8_t> flags(grid_h * grid_w, 0);
  for (std::size_t gr = 0; gr < grid_h; ++gr) {
    for (std::size_t gc = 0; gc < grid_w; ++gc) {
      std::size_t covered = 0;
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c)
          covered += mv[(gr * p + r) * s[1] + gc * p + c] != 0.0 ? 1u : 0u;
      // At least half of the patch pixels, an exact half counting as covered.
      flags[gr * grid_w + gc] = 2 * covered >= p * p ? 1 : 0;
    }
  }
  return flags;
}

Tensor stamp(const Tensor& images, const TriggerSpec& trig) {
  if (images.rank() != 4)
    throw DimensionError("stamp: images must be [n,c,h,w]");
  if (trig.mask.rank() != 2 || trig.pattern.rank() != 3)
    throw DimensionError("stamp: malformed trigger");
  const auto& s = images.shape();
  const auto& ps = trig.pattern.shape();
  const auto& ms = trig.mask.shape();
  if (s[1] != ps[0] || s[2] != ps[1] || s[3] != ps[2] || ms[0] != s[2] ||
      ms[1] != s[3])
    throw DimensionError("stamp: trigger and image shapes disagree");
  Tensor mask_full = tile0(tile0(trig.mask, s[1]), s[0]);
  Tensor pattern_full = tile0(trig.pattern, s[0]);
  return where_mask(mask_full, pattern_full, images);
}

Tensor target_attention(const TriggerSpec& trig, const ModelSpec& spec) {
  spec.validate();
  const auto& ms = trig.mask.shape();
  if (ms[0] != static_cast<std::size_t>(spec.image_size) ||
      ms[1] != static_cast<std::size_t>(spec.image_size))
    throw DimensionError("target_attention: trigger does not fit the model");
  const auto flags = trigger_token_flags(trig.mask, spec.patch_size);
  std::vector<double> t(flags.size());
  for (std::size_t i = 0; i < flags.size(); ++i) t[i] = flags[i] ? 1.0 : 0.0;
  return Tensor::from_data({flags.size()}, std::move(t));
}

namespace {

// Attention rate of a stamped evaluation batch, read through the strategy
// that fits the architecture.
double eval_ar(const Checkpoint& model, const Tensor& images,
               const TriggerSpec& trig, int block) {
  NoGradGuard ng;
  ForwardResult fr = forward(model, stamp(images, trig), true);
  const AttentionStrategy strategy = model.spec().use_cls_token
                                         ? AttentionStrategy::rollout
                                         : AttentionStrategy::raw;
  TokenAttentionVector vec =
      attention_to_tokens(fr.trace, model.spec(), strategy, block);
  return attention_rate(vec, trig, model.spec().patch_size);
}

}  // namespace

TriggerGenResult generate_trigger(const Checkpoint& model,
                                  const LabeledDataset& surrogate,
                                  const TriggerGenConfig& cfg,
                                  const TriggerPlacement& place) {
  if (!model.defined())
    throw ValueError("generate_trigger: undefined model");
  if (surrogate.size() == 0)
    throw ValueError("generate_trigger: empty surrogate");
  const ModelSpec& spec = model.spec();
  const auto& is = surrogate.images.shape();
  if (is[1] != static_cast<std::size_t>(spec.channels) ||
      is[2] != static_cast<std::size_t>(spec.image_size) ||
      is[3] != static_cast<std::size_t>(spec.image_size))
    throw DimensionError(
        "generate_trigger: surrogate images do not fit the model");
  if (cfg.lr < 0.0 || cfg.epochs < 0 || cfg.threshold < 0.0)
    throw ValueError("generate_trigger: bad optimizer config");
  const int block = cfg.block < 0 ? spec.num_blocks - 1 : cfg.block;
  if (block < 0 || block >= spec.num_blocks)
    throw ValueError("generate_trigger: block outside the model");

  // Gradients must flow only into the pattern, so work on a frozen copy.
  Checkpoint work = model.clone();
  for (const auto& name : work.names())
    work.param(name).set_requires_grad(false);

  TriggerSpec trig = make_trigger(spec.image_size, spec.channels, place,
                                  cfg.seed);
  trig.pattern.set_requires_grad(true);
  const AttentionStrategy strategy = spec.use_cls_token
                                         ? AttentionStrategy::rollout
                                         : AttentionStrategy::raw;
  Tensor target = target_attention(trig, spec);

  // Fixed evaluation subset for the attention-rate endpoints.
  std::vector<std::size_t> eval_idx(surrogate.size());
  std::iota(eval_idx.begin(), eval_idx.end(), std::size_t{0});
  Rng eval_rng(derive_seed(cfg.seed, "ar-eval"));
  eval_rng.shuffle(eval_idx.data(), eval_idx.size());
  eval_idx.resize(std::min<std::size_t>(surrogate.size(), 256));
  const Tensor eval_images = surrogate.subset(eval_idx).images;

  TriggerGenResult res;
  res.ar_initial = eval_ar(work, eval_images, trig, block);

  const std::size_t n = surrogate.size();
  const std::size_t bs =
      cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  const auto mask_vals = trig.mask.values();
  const std::size_t plane =
      static_cast<std::size_t>(spec.image_size) * spec.image_size;

  for (int step = 0; step < cfg.epochs; ++step) {
    Tensor batch_images;
    if (bs == n) {
      batch_images = surrogate.images;
    } else {
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      Rng rng(derive_seed(cfg.seed, "trig-batch",
                          static_cast<std::uint64_t>(step)));
      rng.shuffle(idx.data(), idx.size());
      idx.resize(bs);
      batch_images = surrogate.subset(idx).images;
    }

    trig.pattern.zero_grad();
    ForwardResult fr = forward(work, stamp(batch_images, trig), true);
    TokenAttentionVector vec =
        attention_to_tokens(fr.trace, spec, strategy, block);
    Tensor loss = mse(vec.values, tile0(target, bs));
    res.loss_history.push_back(loss.item());
    if (loss.item() < cfg.threshold) break;
    if (cfg.lr == 0.0) continue;

    backward(loss);
    auto pv = trig.pattern.raw_values();
    const auto pg = trig.pattern.grad();
    for (std::size_t c = 0; c < static_cast<std::size_t>(spec.channels); ++c)
      for (std::size_t px = 0; px < plane; ++px)
        if (mask_vals[px] == 1.0) {
          double& v = pv[c * plane + px];
          v = std::clamp(v - cfg.lr * pg[c * plane + px], 0.0, 1.0);
        }
  }

  res.ar_final = eval_ar(work, eval_images, trig, block);
  res.trigger = std::move(trig);
  return res;
}

LabeledDataset build_poisoned_dataset(const LabeledDataset& surrogate,
                                      const TriggerSpec& trig,
                                      int target_label) {
  if (target_label < 0)
    throw ValueError("build_poisoned_dataset: negative target label");
  LabeledDataset out;
  out.split = "poisoned";
  if (surrogate.size() == 0) {
    out.images = surrogate.images;
    return out;
  }
  NoGradGuard ng;
  out.images = stamp(surrogate.images, trig);
  out.labels.assign(surrogate.size(), target_label);
  out.source_labels = surrogate.labels;
  return out;
}

void save_trigger(const TriggerSpec& trig, const std::string& dir,
                  const std::string& config_hash) {
  trig.validate();
  ensure_dir(dir);

  ByteWriter w;
  w.str("VITBTRIG");
  w.u32(1);
  const auto& ps = trig.pattern.shape();
  w.u32(3);
  for (const std::size_t d : ps) w.u64(d);
  for (const double v : trig.pattern.values()) w.f64(v);
  write_file_atomic(dir + "/pattern.bin", w.data());

  write_pbm(dir + "/mask.pbm", trig.mask);

  nlohmann::json meta;
  meta["format"] = "vitbd-trigger";
  meta["version"] = 1;
  meta["placement"] = {{"height", trig.placement.height},
                       {"width", trig.placement.width},
                       {"row", trig.placement.row},
                       {"col", trig.placement.col}};
  meta["image_size"] = trig.mask.shape()[0];
  meta["channels"] = ps[0];
  meta["area_fraction"] = trig.area_fraction();
  if (!config_hash.empty()) meta["config_hash"] = config_hash;
  write_file_atomic(dir + "/meta.json", meta.dump(2) + "\n");
}

TriggerSpec load_trigger(const std::string& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_binary_file(dir + "/meta.json"));
  } catch (const IoError&) {
    throw FormatError(FormatError::Kind::sidecar_missing,
                      "trigger sidecar missing in " + dir);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      "trigger sidecar is not valid JSON: " + dir + ": " +
                          e.what());
  }
  if (!meta.contains("format") || meta["format"] != "vitbd-trigger")
    throw FormatError(FormatError::Kind::corrupt_header,
                      "not a trigger directory: " + dir);
  if (!meta.contains("version") || meta["version"].get<int>() != 1)
    throw FormatError(FormatError::Kind::version_mismatch,
                      "unsupported trigger version in " + dir);
  TriggerPlacement place;
  std::size_t image_size = 0;
  std::size_t channels = 0;
  try {
    const auto& pj = meta.at("placement");
    place.height = pj.at("height").get<int>();
    place.width = pj.at("width").get<int>();
    place.row = pj.at("row").get<int>();
    place.col = pj.at("col").get<int>();
    image_size = meta.at("image_size").get<std::size_t>();
    channels = meta.at("channels").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      "trigger sidecar incomplete: " + dir + ": " + e.what());
  }

  const std::string bytes = read_binary_file(dir + "/pattern.bin");
  ByteReader r(bytes, dir + "/pattern.bin");
  if (r.bytes(8) != "VITBTRIG")
    throw FormatError(FormatError::Kind::corrupt_header,
                      "bad magic in " + dir + "/pattern.bin");
  if (r.u32() != 1)
    throw FormatError(FormatError::Kind::version_mismatch,
                      "unsupported pattern record version in " + dir);
  if (r.u32() != 3)
    throw FormatError(FormatError::Kind::layout_mismatch,
                      "trigger pattern must be rank 3 in " + dir);
  std::vector<std::size_t> dims(3);
  for (std::size_t& d : dims) d = static_cast<std::size_t>(r.u64());
  if (dims[0] != channels || dims[1] != image_size || dims[2] != image_size)
    throw FormatError(FormatError::Kind::sidecar_mismatch,
                      "pattern dims disagree with the sidecar in " + dir);
  std::vector<double> vals(dims[0] * dims[1] * dims[2]);
  for (double& v : vals) {
    v = r.f64();
    if (!(v >= 0.0 && v <= 1.0))
      throw FormatError(FormatError::Kind::bad_content,
                        "pattern value outside [0,1] in " + dir);
  }
  if (!r.at_end())
    throw FormatError(FormatError::Kind::bad_content,
                      "trailing bytes in " + dir + "/pattern.bin");

  TriggerSpec trig;
  trig.pattern = Tensor::from_data(std::move(dims), std::move(vals));
  trig.mask = read_pbm(dir + "/mask.pbm");
  if (trig.mask.shape()[0] != image_size ||
      trig.mask.shape()[1] != image_size)
    throw FormatError(FormatError::Kind::sidecar_mismatch,
                      "mask dims disagree with the sidecar in " + dir);
  trig.placement = place;
  trig.validate();
  return trig;
}

}  // namespace vitbd
