#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitbd/dataset.hpp"
#include "vitbd/model.hpp"

namespace vitbd {

// Fraction of samples whose argmax prediction matches the ground-truth label.
double cda(const Checkpoint& model, const LabeledDataset& clean);

// Fraction of samples predicted as the target class. With exclude_true_target
// the samples whose source label already equals the target are removed first;
// that needs source_labels on the dataset.
double asr(const Checkpoint& model, const LabeledDataset& poisoned,
           int target_label, bool exclude_true_target = false);

enum class AttackKind { badnets, trojaning, dbia };

struct CostEstimate {
  std::size_t tuned_params = 0;
  std::size_t total_params = 0;
  std::size_t images_reversed = 0;
  std::size_t label_count = 0;
};

// Tuning and image-reversal cost per attack family. Full fine-tuning tunes
// every parameter; label-wise reverse engineering needs one image per class
// plus one extra; the attention attack reverses a single trigger image and
// touches only the selected scalars (pass their count).
CostEstimate cost_estimate(AttackKind kind, const Checkpoint& model,
                           std::size_t dbia_tuned_scalars = 0);

struct AttackReport {
  std::string label;  // row name; free of commas and newlines
  double cda_before = 0.0;
  double cda_after = 0.0;
  double asr_surd = 0.0;
  double asr_reld = 0.0;
  double ar = 0.0;  // may be +infinity
  double tpr = 0.0;
  double inject_seconds = 0.0;
  std::string config_hash;

  bool operator==(const AttackReport&) const = default;
};

enum class ReportFormat { text, csv, json };

// Deterministic rendering; CSV preserves every double bit-exactly.
std::string render_report(const std::vector<AttackReport>& reports,
                          ReportFormat format);

std::vector<AttackReport> parse_report_csv(const std::string& text);

}  // namespace vitbd
