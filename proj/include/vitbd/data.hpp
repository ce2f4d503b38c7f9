#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitbd/dataset.hpp"
#include "vitbd/tensor.hpp"

namespace vitbd {

// Procedural stand-in for a real image corpus. Two class families exist and
// never share a class, so a main task drawn from one and a surrogate drawn
// from the other are class-disjoint by construction:
//   geometric: disc, cross, bars, ring
//   texture:   checker, stripes, triangle, dots
struct SyntheticConfig {
  std::string family = "geometric";
  int num_classes = 4;
  int image_size = 32;
  int channels = 3;
  double noise = 0.05;  // additive uniform pixel noise amplitude

  bool operator==(const SyntheticConfig&) const = default;
};

// Class names a family offers, in label order.
std::vector<std::string> family_class_names(const std::string& family);

// n shape images with balanced round-robin labels. Per-sample seeds are
// derived from (seed, index), so the result is independent of thread count.
LabeledDataset gen_synthetic(const SyntheticConfig& cfg, std::size_t n,
                             std::uint64_t seed);

struct SurrogatePolicy {
  std::string source_name;
  std::size_t count = 2000;
  bool require_disjoint = true;

  bool operator==(const SurrogatePolicy&) const = default;
};

// Uniform random subset of the requested size, without replacement. When the
// policy demands disjointness, any class name shared with the main task is an
// error.
LabeledDataset make_surrogate(const LabeledDataset& source,
                              const SurrogatePolicy& policy,
                              const std::vector<std::string>& main_classes,
                              std::uint64_t seed);

// Directory layout: dir/{meta.json, images.bin, labels.bin} with
// source_labels.bin when present. images.bin is raw f64 little-endian in
// tensor order; the sidecar carries shape, class names, split and, when
// given, the config hash of the run that produced the directory.
void export_raw(const LabeledDataset& ds, const std::string& dir,
                const std::string& config_hash = "");
LabeledDataset load_raw(const std::string& dir);

// Nearest-neighbor resize of an [n,c,h,w] batch.
Tensor resize_nearest(const Tensor& images, std::size_t out_h,
                      std::size_t out_w);

}  // namespace vitbd
