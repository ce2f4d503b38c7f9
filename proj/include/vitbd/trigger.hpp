#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitbd/attention.hpp"
#include "vitbd/dataset.hpp"
#include "vitbd/model.hpp"
#include "vitbd/tensor.hpp"
#include "vitbd/trigger_spec.hpp"

namespace vitbd {

struct TriggerGenConfig {
  int block = -1;           // attention block to read; -1 means the last one
  double lr = 1.0;          // plain gradient step size on the pattern
  int epochs = 200;         // maximum optimization steps
  double threshold = 0.02;  // stop once the attention loss drops below this
  std::size_t batch_size = 0;  // samples per step; 0 = full surrogate pass
  std::uint64_t seed = 0;

  bool operator==(const TriggerGenConfig&) const = default;
};

// (1-m)x + mt per pixel. Pixels outside the mask are the source values
// bit for bit, pixels inside are the pattern values bit for bit.
// Differentiable with respect to the pattern (and the images).
Tensor stamp(const Tensor& images, const TriggerSpec& trig);

// The optimization target: 1 on trigger-overlapping tokens, 0 elsewhere.
Tensor target_attention(const TriggerSpec& trig, const ModelSpec& spec);

struct TriggerGenResult {
  TriggerSpec trigger;
  std::vector<double> loss_history;  // loss observed at each executed step
  double ar_initial = 0.0;  // attention rate of the random initialization
  double ar_final = 0.0;    // attention rate of the optimized trigger
};

// Optimizes a single universal trigger so the model's token attention matches
// target_attention on stamped surrogate images. Updates are masked to the
// trigger region and clamped to [0,1]; model parameters are never touched.
TriggerGenResult generate_trigger(const Checkpoint& model,
                                  const LabeledDataset& surrogate,
                                  const TriggerGenConfig& cfg,
                                  const TriggerPlacement& place);

// Stamps every sample and relabels it to the target class; original labels
// are kept as source_labels.
LabeledDataset build_poisoned_dataset(const LabeledDataset& surrogate,
                                      const TriggerSpec& trig,
                                      int target_label);

// Directory layout: dir/{pattern.bin, mask.pbm, meta.json}. The pattern is a
// little-endian f64 record, the mask a 1-bit PBM, the placement JSON. The
// config hash, when given, is embedded for provenance.
void save_trigger(const TriggerSpec& trig, const std::string& dir,
                  const std::string& config_hash = "");
TriggerSpec load_trigger(const std::string& dir);

}  // namespace vitbd
