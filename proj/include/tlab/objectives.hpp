#pragma once

#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

// Counters for degenerate inputs that are defined-but-warned rather than
// errors (empty masking plan, too few samples to form a pair).
struct WarnCounters {
  long long empty_mlm_plan = 0;
  long long tcd_too_few = 0;
  long long hcd_too_few = 0;
};

struct MaskAction {
  int position;
  int original_id;
  int replacement_id;  // mask token, random token, or the original (keep)
};

struct MaskingPlan {
  std::vector<MaskAction> actions;  // ascending by position
  bool empty() const { return actions.empty(); }
};

// Selects whole words until ~mask_ratio of maskable tokens are covered, then
// rolls the standard 80/10/10 mask/random/keep action per covered position.
// word_ids[i] labels the word containing position i; -1 marks positions that
// must never be masked (padding, separators). Deterministic per rng state.
MaskingPlan plan_whole_word_masking(const std::vector<int>& tokens,
                                    const std::vector<int>& word_ids,
                                    double mask_ratio, int vocab_size,
                                    Rng& rng);

std::vector<int> apply_masking(const std::vector<int>& tokens,
                               const MaskingPlan& plan);

// Mean cross-entropy over the plan's positions. Empty plan: 0, counted.
Tensor mlm_loss(const Tensor& logits, const MaskingPlan& plan,
                WarnCounters* warn = nullptr);

// n_prime distinct positions from [0, n), uniform, ascending. Asks for more
// than n: every position.
std::vector<int> sample_tokens(int n, int n_prime, Rng& rng);
// Evenly spaced alternative, same contract, no randomness.
std::vector<int> strided_tokens(int n, int n_prime);

// Mean pairwise cosine of the selected rows of last_hidden. Fewer than two
// rows: 0, counted.
Tensor tcd_loss(const Tensor& last_hidden, const std::vector<int>& indices,
                WarnCounters* warn = nullptr);

// m_prime distinct head indices per layer, uniform, ascending per layer.
std::vector<std::vector<int>> sample_heads(int m, int m_prime, int layers,
                                           Rng& rng);

// Mean pairwise cosine of the sampled heads' flattened attention maps,
// averaged over layers: 2/(L*m'*(m'-1)) * sum. Callers pass pre- or
// post-softmax maps; this function does not care which.
Tensor hcd_loss(const std::vector<std::vector<Tensor>>& attn_maps,
                const std::vector<std::vector<int>>& sampled_heads,
                WarnCounters* warn = nullptr);

// Linear decay 1 - step_cur/step_max, clamped to [0, 1].
double decay_factor(long long step_cur, long long step_max);

struct LossBreakdown {
  double mlm = 0.0;
  double tcd = 0.0;
  double hcd = 0.0;
  double T = 0.0;
  double total = 0.0;
};

struct MthResult {
  Tensor total;  // differentiable combined loss
  LossBreakdown breakdown;
};

// total = mlm + alpha1*T*tcd + alpha2*T*hcd, with the breakdown recording
// exactly the values that satisfy this identity at full precision.
MthResult mth_loss(const Tensor& mlm, const Tensor& tcd, const Tensor& hcd,
                   double alpha1, double alpha2, long long step_cur,
                   long long step_max);

}  // namespace tlab
