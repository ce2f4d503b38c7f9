#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vitbd/dataset.hpp"
#include "vitbd/tensor.hpp"

namespace vitbd {

struct ModelSpec {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_blocks = 3;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 4;
  bool use_cls_token = true;

  void validate() const;  // throws DimensionError on an inconsistent spec

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const {
    return patches_per_side() * patches_per_side();
  }
  std::size_t token_count() const {
    return num_patches() + (use_cls_token ? 1 : 0);
  }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  bool operator==(const ModelSpec&) const = default;
};

struct ParamDef {
  std::string name;
  std::vector<std::size_t> shape;
};

// Canonical parameter order; initialization, serialization and traversal all
// follow it.
std::vector<ParamDef> param_defs(const ModelSpec& spec);
std::vector<std::string> param_layout(const ModelSpec& spec);

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t epochs_trained = 0;
  std::string config_hash;  // provenance stamp; empty outside pipeline runs
};

class Checkpoint {
 public:
  Checkpoint() = default;

  // Fresh parameters: truncated normal (sigma 0.02) weights, zero biases,
  // unit layernorm gains, all drawn from seeds derived per parameter name.
  static Checkpoint init(const ModelSpec& spec, std::uint64_t seed);

  bool defined() const { return !names_.empty(); }
  const ModelSpec& spec() const { return spec_; }
  const CheckpointMeta& meta() const { return meta_; }
  CheckpointMeta& meta() { return meta_; }
  const std::vector<std::string>& names() const { return names_; }

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  std::size_t total_scalars() const;

  // Deep copy with independent parameter storage.
  Checkpoint clone() const;

 private:
  ModelSpec spec_;
  CheckpointMeta meta_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor> params_;
};

// Binary checkpoint with a human-readable "<path>.json" sidecar; round trips
// are bit-exact.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Post-softmax attention, one tensor of shape [n, heads, tokens, tokens] per
// block, in block order. Graph-connected when gradients are enabled.
struct AttentionTrace {
  std::vector<Tensor> blocks;
};

struct ForwardResult {
  Tensor logits;  // [n, num_classes]
  AttentionTrace trace;
};

ForwardResult forward(const Checkpoint& ckpt, const Tensor& batch,
                      bool capture_attention = false);

// Argmax class per sample, evaluated without building graphs.
std::vector<int> predict(const Checkpoint& ckpt, const Tensor& images,
                         std::size_t batch_size = 256);

double accuracy(const Checkpoint& ckpt, const LabeledDataset& data,
                std::size_t batch_size = 256);

// Copies rows order[start..start+count) into a fresh [count,c,h,w] batch.
std::pair<Tensor, std::vector<int>> gather_batch(
    const LabeledDataset& data, const std::vector<std::size_t>& order,
    std::size_t start, std::size_t count);

struct TrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double holdout_fraction = 0.1;
  double min_holdout_cda = 0.0;  // <= 0 disables the floor check
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  double holdout_cda = -1.0;  // -1 when no holdout split exists
  bool reached_floor = true;
  std::vector<double> epoch_loss;
};

TrainResult train_clean(const ModelSpec& spec, const LabeledDataset& data,
                        const TrainConfig& cfg);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  // Applies one update to every parameter that received a gradient.
  void step(Checkpoint& ckpt);

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::unordered_map<std::string,
                     std::pair<std::vector<double>, std::vector<double>>>
      state_;
};

}  // namespace vitbd
