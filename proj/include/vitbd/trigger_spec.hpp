#pragma once

#include <cstdint>
#include <vector>

#include "vitbd/tensor.hpp"

namespace vitbd {

// Where the rectangular patch sits in the image plane. row/col anchor the
// top-left pixel; -1 snaps to the far edge (bottom respectively right).
struct TriggerPlacement {
  int height = 8;
  int width = 8;
  int row = -1;
  int col = -1;

  bool operator==(const TriggerPlacement&) const = default;
};

// A stampable trigger: full-image mask plus full-image pattern. Stamping
// replaces pixels where mask==1 and never reads the pattern elsewhere, so
// values outside the mask are carried but meaningless.
struct TriggerSpec {
  Tensor mask;     // [h,w], entries exactly 0 or 1
  Tensor pattern;  // [c,h,w], values in [0,1]
  TriggerPlacement placement;

  double area_fraction() const;  // sum(mask) / (h*w)
  void validate() const;
};

// Builds the mask from the placement and draws the pattern uniform in [0,1]
// from the given seed.
TriggerSpec make_trigger(int image_size, int channels,
                         const TriggerPlacement& place, std::uint64_t seed);

// One flag per patch token, row-major over the patch grid. A token counts as
// trigger when at least half of its pixels lie under the mask; an exact half
// counts.
std::vector<std::uint8_t> trigger_token_flags(const Tensor& mask,
                                              int patch_size);

}  // namespace vitbd
