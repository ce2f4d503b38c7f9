#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitbd/dataset.hpp"
#include "vitbd/model.hpp"
#include "vitbd/tensor.hpp"
#include "vitbd/trigger_spec.hpp"

namespace vitbd {

// Per-output-unit sum of |incoming weight|. Weights are stored [in, out], so
// unit j's incoming weights form column j. Bias never counts toward a score.
std::vector<double> unit_scores(const Tensor& weight);

struct NeuronRef {
  std::string layer;     // weight path without suffix, e.g. "block2.mlp.fc1"
  std::size_t unit = 0;  // output-unit index within that layer
  double score = 0.0;
  std::size_t tunable_scalars = 0;  // incoming weights plus the unit's bias

  bool operator==(const NeuronRef&) const = default;
};

// Which linear layers of the chosen block are eligible for selection.
struct LayerSet {
  bool mlp = true;         // mlp.fc1 and mlp.fc2
  bool attn_proj = false;  // attention output projection

  bool operator==(const LayerSet&) const = default;
};

struct NeuronSelection {
  // Sorted by score descending; ties by (layer path, then lower unit index).
  std::vector<NeuronRef> entries;
  std::size_t tuned_scalars = 0;
  std::size_t total_scalars = 0;

  double tpr() const {
    if (total_scalars == 0) return 0.0;
    return static_cast<double>(tuned_scalars) /
           static_cast<double>(total_scalars);
  }
};

NeuronSelection select_top_n(const Checkpoint& model, std::size_t block,
                             std::size_t n, const LayerSet& layers = {});

// Longest ranking prefix whose tuned-parameter ratio stays within cap.
NeuronSelection select_within_tpr(const Checkpoint& model, std::size_t block,
                                  double cap, const LayerSet& layers = {});

// Clamps theta elementwise into [theta0 - eps|theta0|, theta0 + eps|theta0|];
// where theta0 == 0 the band is [-zero_floor, +zero_floor]. Plain values,
// no gradient graph.
Tensor project(const Tensor& theta, const Tensor& theta0, double eps,
               double zero_floor);

struct InjectConfig {
  int block = -1;           // -1 selects the last block
  std::size_t neurons = 0;  // 0: size the selection by tpr_cap instead
  double tpr_cap = 0.06;
  LayerSet layers{};
  double epsilon = 2.0;
  double lr = 0.05;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double asr_stop = 0.99;    // stop once monitored ASR exceeds this
  double zero_floor = -1.0;  // < 0: per layer, 0.01 * mean |theta0|
  std::uint64_t seed = 0;

  bool operator==(const InjectConfig&) const = default;
};

struct InjectionLog {
  NeuronSelection selection;
  double epsilon = 0.0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_asr;  // one entry per epoch when monitored
  double final_asr = -1.0;        // -1 when no monitor was given
  bool stopped_early = false;
  // Largest distance outside the projection band seen after any step;
  // exactly 0.0 while the per-step projection holds.
  double max_band_violation = 0.0;
  double inject_seconds = 0.0;

  std::string to_json() const;
};

struct InjectResult {
  Checkpoint model;
  InjectionLog log;
};

// Fine-tunes only the selected neurons of one block on the poisoned set with
// projected gradient descent (projection after every step). Every scalar
// outside the selection stays bit-identical to the input model. Stops early
// once the monitored attack success rate exceeds cfg.asr_stop.
InjectResult inject(const Checkpoint& model, const LabeledDataset& poisoned,
                    const InjectConfig& cfg,
                    const LabeledDataset* monitor = nullptr);

// All-parameter fine-tune on a clean/poisoned mixture. Needs real training
// data, so it serves only as the cost/quality baseline.
Checkpoint inject_badnets_baseline(const Checkpoint& model,
                                   const LabeledDataset& clean,
                                   const TriggerSpec& trigger, int target_label,
                                   double poison_fraction,
                                   const TrainConfig& hyper);

}  // namespace vitbd
