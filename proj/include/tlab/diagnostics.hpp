#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "tlab/model.hpp"

namespace tlab {

// Which attention-map quantity similarity metrics read. Raw scores is the
// default; probabilities are kept for sensitivity runs. Triangle counting and
// visualization always use probabilities.
enum class WeightSpace { pre_softmax, post_softmax };

std::string to_string(WeightSpace space);
WeightSpace weight_space_from_string(const std::string& s);

struct SimilarityReport {
  long long step = 0;
  double mean_fs = 0.0;  // token-level self-similarity, averaged
  double mean_fh = 0.0;  // head-level self-similarity, averaged
  int sentence_count = 0;
};

struct TriangleReport {
  int sentences = 0;       // N
  int matched = 0;         // mn
  double percentage = 0.0; // 100 * matched / N
  double t = 0.0;
  int ms = 0;
  int group1_physical = 0; // sharing group reported as "group 1"
  bool divide_by_ms = false;
};

// Mean pairwise cosine of the rows: 2/(n(n-1)) * sum over i<j. Fewer than
// two rows: absent. Matches the TCD loss value on the full index set bit for
// bit.
std::optional<double> token_self_similarity(const Tensor& last_hidden);

// Mean pairwise cosine of flattened maps, all pairs in every layer:
// 2/(L*m(m-1)) * sum. Fewer than two heads: absent. Matches the HCD loss
// under exhaustive head sampling bit for bit.
std::optional<double> head_self_similarity(
    const std::vector<std::vector<Tensor>>& maps);

// Probability map of one sharing group for one sentence: attn_probs averaged
// over the group's heads and all layers. Square, sentence length a side.
Tensor sentence_group_map(const Encoder& enc, const ForwardTrace& trace,
                          int group);

// Batch version, cropped or zero-padded to ms x ms. Each row is averaged
// over the sentences that reach it, so covered rows still sum to 1.
Tensor group_attention_map(const Encoder& enc,
                           const std::vector<ForwardTrace>& traces, int group,
                           int ms);

// Counting core: per sentence, share of the strict upper triangle of map 1
// and the strict lower triangle of map 2, each divided by the valid length
// (or by ms when divide_by_ms). The group with more total upper-triangle
// mass is labeled 1 once for the whole set; a sentence matches when
// up1 >= t and down2 >= t.
TriangleReport triangle_from_maps(
    const std::vector<std::array<Tensor, 2>>& sentence_maps, double t, int ms,
    bool divide_by_ms);

// Runs the model over the dataset and counts as above. Requires two sharing
// groups.
TriangleReport triangle_percentage(const Encoder& enc,
                                   const std::vector<std::vector<int>>& sentences,
                                   double t, int ms = 64,
                                   bool divide_by_ms = false);

// Means of both similarity metrics over a sentence set at one checkpoint.
SimilarityReport similarity_snapshot(const Encoder& enc,
                                     const std::vector<std::vector<int>>& sentences,
                                     WeightSpace space, long long step);

// Loads each checkpoint (all must share one model config), evaluates the
// snapshot on a seeded sample of the sentences.
// sample_size <= 0 picks min(5000, available).
std::vector<SimilarityReport> similarity_curve(
    const std::vector<std::string>& checkpoint_paths,
    const std::vector<std::vector<int>>& sentences, int sample_size,
    uint64_t seed, WeightSpace space = WeightSpace::pre_softmax);

}  // namespace tlab
