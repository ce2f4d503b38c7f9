#include "vitbd/model.hpp"

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "vitbd/bytes.hpp"
#include "vitbd/fsio.hpp"
#include "vitbd/rng.hpp"

namespace vitbd {

void ModelSpec::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0 || embed_dim == 0 ||
      num_heads == 0 || num_blocks == 0 || mlp_ratio == 0)
    throw DimensionError("model spec fields must be positive");
  if (num_classes < 2)
    throw DimensionError("model spec needs at least two classes");
  if (image_size % patch_size != 0)
    throw DimensionError("image_size " + std::to_string(image_size) +
                         " not divisible by patch_size " +
                         std::to_string(patch_size));
  if (embed_dim % num_heads != 0)
    throw DimensionError("embed_dim " + std::to_string(embed_dim) +
                         " not divisible by num_heads " +
                         std::to_string(num_heads));
}

std::vector<ParamDef> param_defs(const ModelSpec& spec) {
  spec.validate();
  const std::size_t e = spec.embed_dim;
  const std::size_t hdim = spec.mlp_ratio * e;
  std::vector<ParamDef> defs;
  defs.push_back({"patch_embed.weight", {spec.patch_dim(), e}});
  defs.push_back({"patch_embed.bias", {e}});
  if (spec.use_cls_token) defs.push_back({"cls_token", {1, e}});
  defs.push_back({"pos_embed", {spec.token_count(), e}});
  for (std::size_t i = 0; i < spec.num_blocks; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    defs.push_back({p + "ln1.gain", {e}});
    defs.push_back({p + "ln1.bias", {e}});
    // No key bias: a per-key constant shifts every score in a softmax row
    // equally, so it cancels exactly and the parameter would be dead weight.
    defs.push_back({p + "attn.qkv.weight", {e, 3 * e}});
    defs.push_back({p + "attn.q.bias", {e}});
    defs.push_back({p + "attn.v.bias", {e}});
    defs.push_back({p + "attn.proj.weight", {e, e}});
    defs.push_back({p + "attn.proj.bias", {e}});
    defs.push_back({p + "ln2.gain", {e}});
    defs.push_back({p + "ln2.bias", {e}});
    defs.push_back({p + "mlp.fc1.weight", {e, hdim}});
    defs.push_back({p + "mlp.fc1.bias", {hdim}});
    defs.push_back({p + "mlp.fc2.weight", {hdim, e}});
    defs.push_back({p + "mlp.fc2.bias", {e}});
  }
  defs.push_back({"final_ln.gain", {e}});
  defs.push_back({"final_ln.bias", {e}});
  defs.push_back({"head.weight", {e, spec.num_classes}});
  defs.push_back({"head.bias", {spec.num_classes}});
  return defs;
}

std::vector<std::string> param_layout(const ModelSpec& spec) {
  std::vector<std::string> names;
  for (auto& d : param_defs(spec)) names.push_back(std::move(d.name));
  return names;
}

std::string model_spec_to_json(const ModelSpec& spec) {
  nlohmann::json j;
  j["image_size"] = spec.image_size;
  j["channels"] = spec.channels;
  j["patch_size"] = spec.patch_size;
  j["embed_dim"] = spec.embed_dim;
  j["num_heads"] = spec.num_heads;
  j["num_blocks"] = spec.num_blocks;
  j["mlp_ratio"] = spec.mlp_ratio;
  j["num_classes"] = spec.num_classes;
  j["use_cls_token"] = spec.use_cls_token;
  return j.dump();
}

ModelSpec model_spec_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      std::string("model spec json: ") + e.what());
  }
  ModelSpec spec;
  try {
    spec.image_size = j.at("image_size").get<std::size_t>();
    spec.channels = j.at("channels").get<std::size_t>();
    spec.patch_size = j.at("patch_size").get<std::size_t>();
    spec.embed_dim = j.at("embed_dim").get<std::size_t>();
    spec.num_heads = j.at("num_heads").get<std::size_t>();
    spec.num_blocks = j.at("num_blocks").get<std::size_t>();
    spec.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.use_cls_token = j.at("use_cls_token").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      std::string("model spec json: ") + e.what());
  }
  spec.validate();
  return spec;
}

// ---- Checkpoint ------------------------------------------------------------

Checkpoint Checkpoint::init(const ModelSpec& spec, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.spec_ = spec;
  ckpt.meta_.seed = seed;
  for (const ParamDef& def : param_defs(spec)) {
    std::size_t count = 1;
    for (std::size_t d : def.shape) count *= d;
    std::vector<double> v(count, 0.0);
    const bool is_gain = def.name.ends_with(".gain");
    const bool is_bias = def.name.ends_with(".bias");
    if (is_gain) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (!is_bias) {
      Rng rng(derive_seed(seed, def.name.c_str()));
      for (double& x : v) x = rng.truncated_normal(0.02);
    }
    ckpt.names_.push_back(def.name);
    ckpt.params_.emplace(def.name,
                         Tensor::from_data(def.shape, std::move(v), true));
  }
  return ckpt;
}

Tensor& Checkpoint::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValueError("unknown parameter " + name);
  return it->second;
}

const Tensor& Checkpoint::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ValueError("unknown parameter " + name);
  return it->second;
}

std::size_t Checkpoint::total_scalars() const {
  std::size_t n = 0;
  for (const auto& name : names_) n += params_.at(name).size();
  return n;
}

Checkpoint Checkpoint::clone() const {
  Checkpoint c;
  c.spec_ = spec_;
  c.meta_ = meta_;
  c.names_ = names_;
  for (const auto& name : names_) c.params_.emplace(name, params_.at(name).clone());
  return c;
}

// ---- checkpoint file format -------------------------------------------------

namespace {

constexpr char kMagic[8] = {'V', 'I', 'T', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["epochs_trained"] = m.epochs_trained;
  j["config_hash"] = m.config_hash;
  return j;
}

CheckpointMeta meta_from_json(const std::string& text) {
  CheckpointMeta m;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epochs_trained = j.at("epochs_trained").get<std::uint64_t>();
    m.config_hash = j.value("config_hash", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      std::string("checkpoint meta json: ") + e.what());
  }
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  if (!ckpt.defined()) throw ValueError("saving an undefined checkpoint");
  ByteWriter w;
  w.raw(kMagic, 8);
  w.u32(kVersion);
  const std::string spec_json = model_spec_to_json(ckpt.spec());
  const std::string meta_json = meta_to_json(ckpt.meta()).dump();
  w.u64(spec_json.size());
  w.str(spec_json);
  w.u64(meta_json.size());
  w.str(meta_json);
  w.u64(ckpt.names().size());
  for (const auto& name : ckpt.names()) {
    const Tensor& p = ckpt.param(name);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(p.shape().size()));
    for (std::size_t d : p.shape()) w.u64(d);
    for (double v : p.values()) w.f64(v);
  }
  write_file_atomic(path, w.data());

  nlohmann::json side;
  side["format"] = "vitbd-checkpoint";
  side["version"] = kVersion;
  side["spec"] = nlohmann::json::parse(spec_json);
  side["meta"] = meta_to_json(ckpt.meta());
  nlohmann::json params = nlohmann::json::array();
  for (const auto& name : ckpt.names()) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = ckpt.param(name).shape();
    params.push_back(e);
  }
  side["parameters"] = params;
  write_file_atomic(path + ".json", side.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_binary_file(path);
  ByteReader r(data, "checkpoint " + path);
  char magic[8];
  if (data.size() < 8)
    throw FormatError(FormatError::Kind::truncated, "checkpoint " + path +
                      ": shorter than the magic string");
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError(FormatError::Kind::corrupt_header,
                      "checkpoint " + path + ": bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(FormatError::Kind::version_mismatch,
                      "checkpoint " + path + ": version " +
                          std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  const std::string spec_json = r.bytes(r.u64());
  const std::string meta_json = r.bytes(r.u64());
  ModelSpec spec;
  try {
    spec = model_spec_from_json(spec_json);
  } catch (const DimensionError& e) {
    throw FormatError(FormatError::Kind::bad_content,
                      "checkpoint " + path + ": " + e.what());
  }
  const CheckpointMeta meta = meta_from_json(meta_json);

  Checkpoint ckpt = Checkpoint::init(spec, meta.seed);
  ckpt.meta() = meta;
  const auto defs = param_defs(spec);
  const std::uint64_t count = r.u64();
  if (count != defs.size())
    throw FormatError(FormatError::Kind::layout_mismatch,
                      "checkpoint " + path + ": " + std::to_string(count) +
                          " parameters, layout expects " +
                          std::to_string(defs.size()));
  for (const ParamDef& def : defs) {
    const std::string name = r.bytes(r.u32());
    if (name != def.name)
      throw FormatError(FormatError::Kind::layout_mismatch,
                        "checkpoint " + path + ": parameter '" + name +
                            "' where '" + def.name + "' belongs");
    const std::uint32_t ndim = r.u32();
    std::vector<std::size_t> shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i)
      shape[i] = static_cast<std::size_t>(r.u64());
    if (shape != def.shape)
      throw FormatError(FormatError::Kind::layout_mismatch,
                        "checkpoint " + path + ": parameter '" + name +
                            "' has an unexpected shape");
    auto dst = ckpt.param(name).raw_values();
    for (double& v : dst) v = r.f64();
  }
  if (!r.at_end())
    throw FormatError(FormatError::Kind::bad_content,
                      "checkpoint " + path + ": " +
                          std::to_string(r.remaining()) + " trailing bytes");
  return ckpt;
}

// ---- forward -----------------------------------------------------------------

ForwardResult forward(const Checkpoint& ckpt, const Tensor& batch,
                      bool capture_attention) {
  const ModelSpec& sp = ckpt.spec();
  const auto& bs = batch.shape();
  if (bs.size() != 4 || bs[1] != sp.channels || bs[2] != sp.image_size ||
      bs[3] != sp.image_size)
    throw DimensionError("forward: batch shape does not match the model spec");
  const std::size_t n = bs[0];
  const std::size_t P = sp.num_patches();
  const std::size_t T = sp.token_count();
  const std::size_t E = sp.embed_dim;
  const std::size_t H = sp.num_heads;
  const std::size_t dk = sp.head_dim();

  Tensor x = patchify(batch, sp.patch_size);  // [n*P, patch_dim]
  x = add(matmul(x, ckpt.param("patch_embed.weight")),
          ckpt.param("patch_embed.bias"));
  x = reshape(x, {n, P, E});
  if (sp.use_cls_token) {
    Tensor cls = tile0(ckpt.param("cls_token"), n);  // [n,1,E]
    std::vector<Tensor> parts{cls, x};
    x = concat(parts, 1);
  }
  x = add(x, tile0(ckpt.param("pos_embed"), n));  // [n,T,E]

  auto to_heads = [&](const Tensor& t) {
    return reshape(transpose(reshape(t, {n, T, H, dk}), 1, 2), {n * H, T, dk});
  };

  AttentionTrace trace;
  for (std::size_t b = 0; b < sp.num_blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    Tensor resid = x;
    Tensor h = reshape(x, {n * T, E});
    h = layernorm(h, ckpt.param(pre + "ln1.gain"), ckpt.param(pre + "ln1.bias"));
    Tensor qkv = matmul(h, ckpt.param(pre + "attn.qkv.weight"));
    Tensor q = to_heads(add(slice(qkv, 1, 0, E), ckpt.param(pre + "attn.q.bias")));
    Tensor k = to_heads(slice(qkv, 1, E, E));
    Tensor v = to_heads(
        add(slice(qkv, 1, 2 * E, E), ckpt.param(pre + "attn.v.bias")));
    Tensor scores = scale(matmul(q, transpose(k, 1, 2)),
                          1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor attn = softmax(scores, 2);  // [n*H, T, T]
    if (capture_attention)
      trace.blocks.push_back(reshape(attn, {n, H, T, T}));
    Tensor ctx = matmul(attn, v);  // [n*H, T, dk]
    ctx = reshape(transpose(reshape(ctx, {n, H, T, dk}), 1, 2), {n * T, E});
    Tensor proj = add(matmul(ctx, ckpt.param(pre + "attn.proj.weight")),
                      ckpt.param(pre + "attn.proj.bias"));
    x = add(resid, reshape(proj, {n, T, E}));

    Tensor resid2 = x;
    Tensor h2 = reshape(x, {n * T, E});
    h2 = layernorm(h2, ckpt.param(pre + "ln2.gain"), ckpt.param(pre + "ln2.bias"));
    Tensor f1 = gelu(add(matmul(h2, ckpt.param(pre + "mlp.fc1.weight")),
                         ckpt.param(pre + "mlp.fc1.bias")));
    Tensor f2 = add(matmul(f1, ckpt.param(pre + "mlp.fc2.weight")),
                    ckpt.param(pre + "mlp.fc2.bias"));
    x = add(resid2, reshape(f2, {n, T, E}));
  }

  Tensor fin = layernorm(reshape(x, {n * T, E}), ckpt.param("final_ln.gain"),
                         ckpt.param("final_ln.bias"));
  fin = reshape(fin, {n, T, E});
  Tensor pooled =
      sp.use_cls_token
          ? reshape(slice(fin, 1, 0, 1), {n, E})
          : scale(sum_axis(fin, 1), 1.0 / static_cast<double>(T));
  Tensor logits =
      add(matmul(pooled, ckpt.param("head.weight")), ckpt.param("head.bias"));
  return {std::move(logits), std::move(trace)};
}

std::vector<int> predict(const Checkpoint& ckpt, const Tensor& images,
                         std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("predict: batch_size must be positive");
  const auto& s = images.shape();
  if (s.size() != 4) throw DimensionError("predict: images must be [n,c,h,w]");
  const std::size_t n = s[0];
  const std::size_t stride = s[1] * s[2] * s[3];
  const std::size_t classes = ckpt.spec().num_classes;
  auto vals = images.values();
  std::vector<int> preds(n);
  NoGradGuard ng;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t b = std::min(batch_size, n - start);
    std::vector<double> chunk(vals.begin() + start * stride,
                              vals.begin() + (start + b) * stride);
    Tensor batch = Tensor::from_data({b, s[1], s[2], s[3]}, std::move(chunk));
    Tensor logits = forward(ckpt, batch, false).logits;
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < classes; ++j)
        if (logits.at({i, j}) > logits.at({i, best})) best = j;
      preds[start + i] = static_cast<int>(best);
    }
  }
  return preds;
}

double accuracy(const Checkpoint& ckpt, const LabeledDataset& data,
                std::size_t batch_size) {
  if (data.size() == 0) throw ValueError("accuracy of an empty dataset");
  const std::vector<int> preds = predict(ckpt, data.images, batch_size);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == data.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ---- training -----------------------------------------------------------------

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(Checkpoint& ckpt) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& name : ckpt.names()) {
    Tensor& p = ckpt.param(name);
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& [m, v] = state_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    auto w = p.raw_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

std::pair<Tensor, std::vector<int>> gather_batch(
    const LabeledDataset& data, const std::vector<std::size_t>& order,
    std::size_t start, std::size_t count) {
  const auto& s = data.images.shape();
  const std::size_t stride = s[1] * s[2] * s[3];
  auto vals = data.images.values();
  std::vector<double> buf(count * stride);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = order[start + i];
    std::copy_n(vals.data() + src * stride, stride, buf.data() + i * stride);
    labels[i] = data.labels[src];
  }
  return {Tensor::from_data({count, s[1], s[2], s[3]}, std::move(buf)),
          std::move(labels)};
}

TrainResult train_clean(const ModelSpec& spec, const LabeledDataset& data,
                        const TrainConfig& cfg) {
  spec.validate();
  data.validate(spec.num_classes);
  if (data.size() == 0) throw ValueError("train_clean: empty dataset");
  if (cfg.batch_size == 0) throw ValueError("train_clean: batch_size must be positive");

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(cfg.seed, "holdout"));
  split_rng.shuffle(order.data(), order.size());
  const std::size_t n_hold =
      static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg.holdout_fraction));
  if (n_hold >= n)
    throw ValueError("train_clean: holdout fraction leaves no training data");
  std::vector<std::size_t> hold_idx(order.begin(), order.begin() + n_hold);
  std::vector<std::size_t> train_idx(order.begin() + n_hold, order.end());

  TrainResult result;
  result.checkpoint = Checkpoint::init(spec, cfg.seed);
  Checkpoint& ckpt = result.checkpoint;
  Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, "epoch", epoch));
    erng.shuffle(train_idx.data(), train_idx.size());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < train_idx.size();
         start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, train_idx.size() - start);
      auto [batch, labels] = gather_batch(data, train_idx, start, b);
      Tensor loss = cross_entropy(forward(ckpt, batch, false).logits, labels);
      for (const auto& name : ckpt.names()) ckpt.param(name).zero_grad();
      backward(loss);
      opt.step(ckpt);
      loss_sum += loss.item() * static_cast<double>(b);
    }
    result.epoch_loss.push_back(loss_sum /
                                static_cast<double>(train_idx.size()));
  }
  ckpt.meta().epochs_trained = cfg.epochs;

  if (!hold_idx.empty()) {
    result.holdout_cda = accuracy(ckpt, data.subset(hold_idx));
    result.reached_floor =
        cfg.min_holdout_cda <= 0.0 || result.holdout_cda >= cfg.min_holdout_cda;
  }
  return result;
}

}  // namespace vitbd
