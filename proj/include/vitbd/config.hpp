#pragma once

#include <cstdint>
#include <string>

#include "vitbd/data.hpp"
#include "vitbd/inject.hpp"
#include "vitbd/model.hpp"
#include "vitbd/trigger.hpp"

namespace vitbd {

// One JSON file drives the whole experiment. Every field has a default, so an
// empty object {} is a valid config; unknown keys are rejected rather than
// silently ignored. Stage seeds are not part of the file: each stage derives
// its own stream from the single master seed, which keeps "same config, same
// seed, same bits" a one-knob property.
struct ExperimentConfig {
  ModelSpec model;

  SyntheticConfig data;  // main-task generator
  std::size_t train_samples = 4096;
  std::size_t test_samples = 1024;

  // Surrogate images stand in for the training set the attacker never sees.
  // Default family is disjoint from the main task by class name.
  SyntheticConfig surrogate_data{"texture"};
  SurrogatePolicy surrogate;

  TrainConfig train;
  TriggerPlacement trigger_place;
  TriggerGenConfig trigger_gen;
  InjectConfig inject;

  int target_label = 0;
  std::uint64_t seed = 0;

  // Not hashed: where artifacts land and whether wall-clock times are
  // recorded in them. Neither changes any computed number.
  std::string out_dir;
  bool record_timing = true;

  void validate() const;  // cross-module consistency; throws ValueError

  bool operator==(const ExperimentConfig&) const = default;
};

// Compact JSON with sorted keys, out_dir and record_timing left out. Two
// configs that run the same experiment hash alike even when their output
// paths differ.
std::string canonical_json(const ExperimentConfig& cfg);

// FNV-1a over the canonical form; the hex form stamps every artifact.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string config_hash_hex(const ExperimentConfig& cfg);

std::string experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const std::string& text);

ExperimentConfig load_experiment(const std::string& path);
void save_experiment(const ExperimentConfig& cfg, const std::string& path);

}  // namespace vitbd
