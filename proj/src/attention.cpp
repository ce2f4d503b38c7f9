#include "vitbd/attention.hpp"

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "vitbd/errors.hpp"

namespace vitbd {

namespace {

Tensor batched_identity(std::size_t n, std::size_t t) {
  Tensor eye = Tensor::zeros({t, t});
  auto vals = eye.raw_values();
  for (std::size_t i = 0; i < t; ++i) vals[i * t + i] = 1.0;
  return tile0(eye, n);
}

// normalize_rows only speaks 2D; fold the batch into the row axis around it.
Tensor renorm3(const Tensor& x) {
  const auto s = x.shape();
  Tensor flat = reshape(x, {s[0] * s[1], s[2]});
  return reshape(normalize_rows(flat), {s[0], s[1], s[2]});
}

// normalize(mean_heads(A_l) + I) for one traced block [n,H,T,T].
Tensor block_factor(const Tensor& block, bool renormalize) {
  const auto& s = block.shape();
  Tensor avg = scale(sum_axis(block, 1), 1.0 / static_cast<double>(s[1]));
  Tensor aug = add(avg, batched_identity(s[0], s[2]));
  return renormalize ? renorm3(aug) : aug;
}

void check_trace(const AttentionTrace& trace, int L) {
  if (trace.blocks.empty())
    throw ValueError("rollout: empty attention trace");
  if (L < 0 || static_cast<std::size_t>(L) >= trace.blocks.size())
    throw ValueError("rollout: block index " + std::to_string(L) +
                     " outside trace of " +
                     std::to_string(trace.blocks.size()) + " blocks");
}

}  // namespace

RolloutMap rollout(const AttentionTrace& trace, int L, bool renormalize) {
  check_trace(trace, L);
  Tensor acc = block_factor(trace.blocks[0], renormalize);
  for (int l = 1; l <= L; ++l)
    acc = matmul(block_factor(trace.blocks[static_cast<std::size_t>(l)],
                              renormalize),
                 acc);
  return {acc, L, AttentionStrategy::rollout};
}

TokenAttentionVector attention_to_tokens(const AttentionTrace& trace,
                                         AttentionStrategy strategy, int L,
                                         bool has_cls_token,
                                         bool renormalize) {
  check_trace(trace, L);
  const auto& s = trace.blocks[0].shape();  // [n,H,T,T]
  const std::size_t n = s[0];
  const std::size_t tokens = s[2];
  const std::size_t patches = tokens - (has_cls_token ? 1 : 0);
  if (patches == 0)
    throw ValueError("attention_to_tokens: no patch tokens");

  if (strategy == AttentionStrategy::rollout) {
    if (!has_cls_token)
      throw ValueError(
          "attention_to_tokens: rollout strategy reads the CLS row, but the "
          "model has no CLS token");
    Tensor m = rollout(trace, L, renormalize).matrix;  // [n,T,T]
    Tensor cls_row = slice(m, 1, 0, 1);                // [n,1,T]
    Tensor patch_cols = slice(cls_row, 2, tokens - patches, patches);
    return {reshape(patch_cols, {n, patches}), 0};
  }

  // raw: head-averaged A_L, mean-pooled over query rows, per key token.
  const Tensor& block = trace.blocks[static_cast<std::size_t>(L)];
  Tensor avg = scale(sum_axis(block, 1), 1.0 / static_cast<double>(s[1]));
  Tensor pooled =
      scale(sum_axis(avg, 1), 1.0 / static_cast<double>(tokens));  // [n,T]
  Tensor patch_cols = slice(pooled, 1, tokens - patches, patches);
  return {patch_cols, 0};
}

TokenAttentionVector attention_to_tokens(const AttentionTrace& trace,
                                         const ModelSpec& spec,
                                         AttentionStrategy strategy, int L,
                                         bool renormalize) {
  check_trace(trace, L);
  if (trace.blocks[0].shape()[2] != spec.token_count())
    throw DimensionError(
        "attention_to_tokens: trace token count does not match the spec");
  TokenAttentionVector vec = attention_to_tokens(trace, strategy, L,
                                                 spec.use_cls_token,
                                                 renormalize);
  vec.grid = static_cast<int>(spec.patches_per_side());
  return vec;
}

double attention_rate(const Tensor& values,
                      const std::vector<std::uint8_t>& trigger_flags) {
  const auto& s = values.shape();
  std::size_t n = 1;
  std::size_t p = 0;
  if (s.size() == 1) {
    p = s[0];
  } else if (s.size() == 2) {
    n = s[0];
    p = s[1];
  } else {
    throw DimensionError(
        "attention_rate: values must be [patches] or [n,patches]");
  }
  if (p != trigger_flags.size())
    throw DimensionError("attention_rate: flag count does not match tokens");

  std::size_t trig_count = 0;
  for (const std::uint8_t f : trigger_flags) trig_count += f ? 1u : 0u;
  if (trig_count == 0)
    throw ValueError("attention_rate: trigger overlaps no tokens");

  double trig_sum = 0.0;
  double bg_sum = 0.0;
  const auto vals = values.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j)
      (trigger_flags[j] ? trig_sum : bg_sum) += vals[i * p + j];

  if (trig_count == p) return std::numeric_limits<double>::infinity();
  const double trig_mean =
      trig_sum / static_cast<double>(trig_count * n);
  const double bg_mean =
      bg_sum / static_cast<double>((p - trig_count) * n);
  if (bg_mean == 0.0) return std::numeric_limits<double>::infinity();
  return trig_mean / bg_mean;
}

double attention_rate(const TokenAttentionVector& vec, const TriggerSpec& trig,
                      int patch_size) {
  return attention_rate(vec.values,
                        trigger_token_flags(trig.mask, patch_size));
}

Tensor attention_heatmap(const TokenAttentionVector& vec, int patch_size) {
  const auto& s = vec.values.shape();
  std::size_t n = 1;
  std::size_t p = 0;
  if (s.size() == 1) {
    p = s[0];
  } else if (s.size() == 2) {
    n = s[0];
    p = s[1];
  } else {
    throw DimensionError(
        "attention_heatmap: values must be [patches] or [n,patches]");
  }
  const std::size_t grid = static_cast<std::size_t>(vec.grid);
  if (grid == 0 || grid * grid != p)
    throw ValueError("attention_heatmap: patch grid unknown or inconsistent");
  if (patch_size <= 0) throw ValueError("attention_heatmap: bad patch size");

  std::vector<double> pooled(p, 0.0);
  const auto vals = vec.values.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) pooled[j] += vals[i * p + j];
  double mx = 0.0;
  for (double& v : pooled) {
    v /= static_cast<double>(n);
    if (v > mx) mx = v;
  }

  const std::size_t ps = static_cast<std::size_t>(patch_size);
  const std::size_t side = grid * ps;
  Tensor out = Tensor::zeros({side, side});
  if (mx <= 0.0) return out;
  auto img = out.raw_values();
  for (std::size_t j = 0; j < p; ++j) {
    const std::size_t pr = j / grid;
    const std::size_t pc = j % grid;
    const double v = pooled[j] / mx;
    for (std::size_t r = 0; r < ps; ++r)
      for (std::size_t c = 0; c < ps; ++c)
        img[(pr * ps + r) * side + pc * ps + c] = v;
  }
  return out;
}

}  // namespace vitbd
