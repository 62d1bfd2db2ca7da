#include "tlab/objectives.hpp"

#include <algorithm>
#include <numeric>

#include "tlab/error.hpp"
#include "tlab/token_ids.hpp"

namespace tlab {

namespace {

// First n_prime entries of a partial Fisher-Yates pass, i.e. a uniform
// without-replacement draw.
std::vector<int> draw_without_replacement(int n, int n_prime, Rng& rng) {
  std::vector<int> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  const int take = std::min(n_prime, n);
  for (int i = 0; i < take; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n - i)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

MaskingPlan plan_whole_word_masking(const std::vector<int>& tokens,
                                    const std::vector<int>& word_ids,
                                    double mask_ratio, int vocab_size,
                                    Rng& rng) {
  if (tokens.size() != word_ids.size())
    throw std::invalid_argument("masking: word_ids must align with tokens");
  if (mask_ratio < 0.0 || mask_ratio > 1.0)
    throw ConfigError("mask_ratio must lie in [0, 1]");
  MaskingPlan plan;
  if (mask_ratio == 0.0) return plan;

  // words in first-appearance order, each with its covered positions
  std::vector<int> word_order;
  std::vector<std::vector<int>> word_positions;
  std::vector<int> slot_of_word;
  int maskable = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const int w = word_ids[i];
    if (w < 0) continue;
    ++maskable;
    if (w >= static_cast<int>(slot_of_word.size()))
      slot_of_word.resize(w + 1, -1);
    if (slot_of_word[w] < 0) {
      slot_of_word[w] = static_cast<int>(word_order.size());
      word_order.push_back(w);
      word_positions.emplace_back();
    }
    word_positions[slot_of_word[w]].push_back(static_cast<int>(i));
  }
  if (maskable == 0) return plan;

  std::vector<int> shuffled(word_order.size());
  std::iota(shuffled.begin(), shuffled.end(), 0);
  for (size_t i = 0; i + 1 < shuffled.size(); ++i) {
    const size_t j = i + rng.below(shuffled.size() - i);
    std::swap(shuffled[i], shuffled[j]);
  }

  const double target = mask_ratio * maskable;
  std::vector<int> positions;
  double covered = 0.0;
  for (int slot : shuffled) {
    if (covered >= target) break;
    for (int pos : word_positions[slot]) positions.push_back(pos);
    covered += static_cast<double>(word_positions[slot].size());
  }
  std::sort(positions.begin(), positions.end());

  plan.actions.reserve(positions.size());
  for (int pos : positions) {
    const int original = tokens[pos];
    int replacement;
    const double roll = rng.uniform();
    if (roll < 0.8) {
      replacement = kMaskId;
    } else if (roll < 0.9 && vocab_size > kReservedIds) {
      replacement =
          kReservedIds +
          static_cast<int>(rng.below(static_cast<uint64_t>(vocab_size - kReservedIds)));
    } else {
      replacement = original;
    }
    plan.actions.push_back({pos, original, replacement});
  }
  return plan;
}

std::vector<int> apply_masking(const std::vector<int>& tokens,
                               const MaskingPlan& plan) {
  std::vector<int> out = tokens;
  for (const auto& a : plan.actions) {
    if (a.position < 0 || a.position >= static_cast<int>(out.size()))
      throw std::invalid_argument("masking: plan position out of range");
    out[a.position] = a.replacement_id;
  }
  return out;
}

Tensor mlm_loss(const Tensor& logits, const MaskingPlan& plan,
                WarnCounters* warn) {
  if (plan.empty()) {
    if (warn) ++warn->empty_mlm_plan;
    return Tensor::scalar(0.0);
  }
  Tensor lsm = log_softmax_rows(logits);
  std::vector<std::pair<int, int>> rc;
  rc.reserve(plan.actions.size());
  for (const auto& a : plan.actions) rc.emplace_back(a.position, a.original_id);
  return scale(sum(pick_entries(lsm, rc)),
               -1.0 / static_cast<double>(plan.actions.size()));
}

std::vector<int> sample_tokens(int n, int n_prime, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_tokens: empty range");
  if (n_prime < 1) throw ConfigError("n_prime must be positive");
  return draw_without_replacement(n, n_prime, rng);
}

std::vector<int> strided_tokens(int n, int n_prime) {
  if (n < 1) throw std::invalid_argument("strided_tokens: empty range");
  if (n_prime < 1) throw ConfigError("n_prime must be positive");
  const int take = std::min(n_prime, n);
  std::vector<int> out;
  out.reserve(take);
  // floor(k * n / take) visits [0, n) evenly and strictly increases
  for (int k = 0; k < take; ++k)
    out.push_back(static_cast<int>(static_cast<long long>(k) * n / take));
  return out;
}

Tensor tcd_loss(const Tensor& last_hidden, const std::vector<int>& indices,
                WarnCounters* warn) {
  const int k = static_cast<int>(indices.size());
  if (k < 2) {
    if (warn) ++warn->tcd_too_few;
    return Tensor::scalar(0.0);
  }
  std::vector<Tensor> rows;
  rows.reserve(indices.size());
  for (int idx : indices) rows.push_back(row(last_hidden, idx));
  std::vector<Tensor> pair_cosines;
  pair_cosines.reserve(static_cast<size_t>(k) * (k - 1) / 2);
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j)
      pair_cosines.push_back(cosine(rows[i], rows[j]));
  return scale(sum_list(pair_cosines),
               2.0 / (static_cast<double>(k) * (k - 1)));
}

std::vector<std::vector<int>> sample_heads(int m, int m_prime, int layers,
                                           Rng& rng) {
  if (m < 1) throw std::invalid_argument("sample_heads: no heads");
  if (m_prime < 1) throw ConfigError("m_prime must be positive");
  std::vector<std::vector<int>> out;
  out.reserve(layers);
  for (int l = 0; l < layers; ++l)
    out.push_back(draw_without_replacement(m, m_prime, rng));
  return out;
}

Tensor hcd_loss(const std::vector<std::vector<Tensor>>& attn_maps,
                const std::vector<std::vector<int>>& sampled_heads,
                WarnCounters* warn) {
  const int layers = static_cast<int>(attn_maps.size());
  if (layers < 1 || sampled_heads.size() != attn_maps.size())
    throw std::invalid_argument("hcd: sampled heads must align with layers");
  const int mp = static_cast<int>(sampled_heads[0].size());
  if (mp < 2) {
    if (warn) ++warn->hcd_too_few;
    return Tensor::scalar(0.0);
  }
  std::vector<Tensor> pair_cosines;
  pair_cosines.reserve(static_cast<size_t>(layers) * mp * (mp - 1) / 2);
  for (int l = 0; l < layers; ++l) {
    const auto& heads = sampled_heads[l];
    if (static_cast<int>(heads.size()) != mp)
      throw std::invalid_argument("hcd: ragged head sample");
    for (int i = 0; i < mp; ++i)
      for (int j = i + 1; j < mp; ++j)
        pair_cosines.push_back(
            cosine(attn_maps[l][heads[i]], attn_maps[l][heads[j]]));
  }
  // Same normalization expression as the diagnostics' similarity metric so
  // exhaustive sampling reproduces it bit for bit.
  return scale(sum_list(pair_cosines),
               2.0 / (static_cast<double>(layers) * mp * (mp - 1)));
}

double decay_factor(long long step_cur, long long step_max) {
  if (step_max <= 0) throw ConfigError("step_max must be positive");
  const double t =
      1.0 - static_cast<double>(step_cur) / static_cast<double>(step_max);
  return std::clamp(t, 0.0, 1.0);
}

MthResult mth_loss(const Tensor& mlm, const Tensor& tcd, const Tensor& hcd,
                   double alpha1, double alpha2, long long step_cur,
                   long long step_max) {
  const double t = decay_factor(step_cur, step_max);
  MthResult r;
  r.total = add(add(mlm, scale(tcd, alpha1 * t)), scale(hcd, alpha2 * t));
  r.breakdown.mlm = mlm.value();
  r.breakdown.tcd = tcd.value();
  r.breakdown.hcd = hcd.value();
  r.breakdown.T = t;
  r.breakdown.total = r.total.value();
  return r;
}

}  // namespace tlab
