#pragma once

#include <cstdint>
#include <vector>

#include "vitbd/model.hpp"
#include "vitbd/tensor.hpp"
#include "vitbd/trigger_spec.hpp"

namespace vitbd {

enum class AttentionStrategy { rollout, raw };

// Accumulated attention flow from the input tokens up to block L, one
// [tokens, tokens] matrix per sample stacked along axis 0.
struct RolloutMap {
  Tensor matrix;  // [n, tokens, tokens]
  int source_block = 0;
  AttentionStrategy strategy = AttentionStrategy::rollout;
};

// Scalar attention mass per patch token, one row per sample.
struct TokenAttentionVector {
  Tensor values;  // [n, patch_tokens]
  int grid = 0;   // patches per side; 0 when the caller gave no geometry
};

// Multiplies up the per-block factors normalize(mean_heads(A_l) + I) from
// block 0 through block L. Row renormalization keeps every row a
// distribution; pass renormalize=false to study the raw product. The result
// stays differentiable with respect to the trace.
RolloutMap rollout(const AttentionTrace& trace, int L, bool renormalize = true);

// rollout strategy: CLS-token row of the rollout matrix, restricted to patch
// tokens (requires a CLS model). raw strategy: head-averaged A_L, mean-pooled
// over query rows, restricted to patch tokens. Differentiable.
TokenAttentionVector attention_to_tokens(const AttentionTrace& trace,
                                         AttentionStrategy strategy, int L,
                                         bool has_cls_token,
                                         bool renormalize = true);
// Same, taking the geometry from the model spec (fills in the patch grid).
TokenAttentionVector attention_to_tokens(const AttentionTrace& trace,
                                         const ModelSpec& spec,
                                         AttentionStrategy strategy, int L,
                                         bool renormalize = true);

// Mean attention over trigger tokens divided by mean attention over the
// rest, pooled over the batch. All attention on the trigger (or a zero
// background) reports +infinity. Throws if no token is a trigger token.
double attention_rate(const Tensor& values,
                      const std::vector<std::uint8_t>& trigger_flags);
double attention_rate(const TokenAttentionVector& vec, const TriggerSpec& trig,
                      int patch_size);

// Token attention painted back onto the pixel grid: batch-averaged,
// max-normalized to [0,1], each patch block filled with its token's value.
Tensor attention_heatmap(const TokenAttentionVector& vec, int patch_size);

}  // namespace vitbd
