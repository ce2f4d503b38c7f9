#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "vitbd/errors.hpp"
#include "vitbd/tensor.hpp"

namespace vitbd {

struct LabeledDataset {
  Tensor images;                  // [n,c,h,w] leaf, pixel values in [0,1]
  std::vector<int> labels;        // class per sample
  std::vector<int> source_labels; // labels before poisoning; empty when clean
  std::vector<std::string> class_names;  // label order; may be empty
  std::string split;              // free-form tag: train / test / surrogate

  std::size_t size() const { return labels.size(); }

  void validate(std::size_t num_classes) const {
    if (!images.defined() || images.rank() != 4)
      throw DimensionError("dataset images must be [n,c,h,w]");
    if (images.shape()[0] != labels.size())
      throw DimensionError("dataset image and label counts differ");
    if (!source_labels.empty() && source_labels.size() != labels.size())
      throw DimensionError("dataset source_label count differs");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
        throw ValueError("dataset label outside class range");
  }

  LabeledDataset subset(const std::vector<std::size_t>& idx) const {
    const auto& s = images.shape();
    const std::size_t stride = s[1] * s[2] * s[3];
    auto v = images.values();
    std::vector<double> out(idx.size() * stride);
    std::vector<int> lab(idx.size());
    std::vector<int> src(source_labels.empty() ? 0 : idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= labels.size())
        throw DimensionError("subset index out of range");
      std::copy_n(v.data() + idx[i] * stride, stride, out.data() + i * stride);
      lab[i] = labels[idx[i]];
      if (!src.empty()) src[i] = source_labels[idx[i]];
    }
    LabeledDataset d;
    d.images = Tensor::from_data({idx.size(), s[1], s[2], s[3]}, std::move(out));
    d.labels = std::move(lab);
    d.source_labels = std::move(src);
    d.class_names = class_names;
    d.split = split;
    return d;
  }
};

}  // namespace vitbd
