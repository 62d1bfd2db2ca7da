#pragma once

#include <string>
#include <utility>

#include "tlab/tensor.hpp"

namespace tlab {

enum class EncodingKind { absolute, shaw, tupe, deberta, ddrp };

EncodingKind encoding_kind_from_string(const std::string& s);
std::string to_string(EncodingKind kind);

// Position index functions shared by the relative encodings.
//
// Two clip conventions coexist deliberately. The signed clip lands in
// [-r_s, r_s-1], the unique range under which sigma() fills a 2*r_s-row
// table. The distance clip lands in [0, r_s-1] so that delta() fills an
// r_s-row table; it saturates one step earlier on the positive side.
class RelPosIndexer {
 public:
  explicit RelPosIndexer(int r_s = 64);

  int r_s() const { return r_s_; }

  // clamp(i - j) into [-r_s, r_s-1]
  int clip(int diff) const;
  // clip(i - j) + r_s, in [0, 2*r_s - 1]
  int sigma(int i, int j) const;
  // (delta, rho): delta = |clamp(i - j, -(r_s-1), r_s-1)| in [0, r_s-1];
  // rho = 0 iff i == j, 1 iff i < j, 2 iff i > j
  std::pair<int, int> delta_rho(int i, int j) const;

  // Precomputed s x s grids for the gather primitives.
  IndexGrid sigma_grid(int s) const;          // entry (i,j) = sigma(i,j)
  IndexGrid sigma_grid_swapped(int s) const;  // entry (i,j) = sigma(j,i)
  // entry (i,j) = delta*3 + rho, the row index into a ddrp_table
  IndexGrid delta_rho_grid(int s) const;

 private:
  int r_s_;
};

// Parameters owned by one head-sharing group. Only the tensors used by
// `kind` are defined; the rest stay default-constructed.
struct EncodingParams {
  EncodingKind kind = EncodingKind::absolute;
  Tensor abs_pos;        // absolute, tupe: [r_a x D]
  Tensor rel_key;        // shaw, deberta: [2*r_s x d]
  Tensor rel_query;      // deberta: [2*r_s x d]
  Tensor pos_query_proj; // tupe: [D x d]
  Tensor pos_key_proj;   // tupe: [D x d]
  Tensor rel_bias;       // tupe: [2*r_s]
  Tensor dir_embed;      // ddrp: [3 x d], rows indexed by rho
  Tensor dist_embed;     // ddrp: [r_s x d], rows indexed by delta
  Tensor dir_dist_proj;  // ddrp: [d x d]
};

struct AttentionOutput {
  Tensor weights;  // pre-softmax logits [S x S], the diagnostics quantity
  Tensor probs;    // softmax(weights)
  Tensor output;   // probs * V, [S x d]
};

// weights[i,j] = q_i . k_j / sqrt(d)
AttentionOutput attention_vanilla(const Tensor& q, const Tensor& k,
                                  const Tensor& v);

// weights[i,j] = q_i . (k_j + rel_key[sigma(i,j)]) / sqrt(d)
AttentionOutput attention_shaw(const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& rel_key,
                               const RelPosIndexer& indexer);

// weights[i,j] = (q_i . k_j + qp_i . kp_j) / sqrt(2d) + rel_bias[sigma(i,j)]
// where qp = abs_pos[0..S) * pos_query_proj and kp likewise. Positions only
// enter here; the caller must not also add abs_pos into the input embedding.
AttentionOutput attention_tupe(const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& abs_pos,
                               const Tensor& pos_query_proj,
                               const Tensor& pos_key_proj,
                               const Tensor& rel_bias,
                               const RelPosIndexer& indexer);

// weights[i,j] = (q_i . k_j + q_i . rel_key[sigma(i,j)]
//                 + k_j . rel_query[sigma(j,i)]) / sqrt(3d)
// The third term indexes with the arguments swapped; regression-tested.
AttentionOutput attention_deberta(const Tensor& q, const Tensor& k,
                                  const Tensor& v, const Tensor& rel_key,
                                  const Tensor& rel_query,
                                  const RelPosIndexer& indexer);

// Materializes the decoupled table: row (delta*3 + rho) =
// (dir_embed[rho] elementwise* dist_embed[delta]) * dir_dist_proj.
// Built once per forward pass, differentiable into all three inputs.
Tensor ddrp_table(const Tensor& dir_embed, const Tensor& dist_embed,
                  const Tensor& dir_dist_proj);

// weights[i,j] = q_i . (k_j + table[delta_rho(i,j)]) / sqrt(d)
AttentionOutput attention_ddrp(const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& table,
                               const RelPosIndexer& indexer);

// Parameters a variant adds on top of the vanilla encoder, per sharing
// group. (d: head dim, D: hidden, r_s: max relative distance, r_a: max
// absolute length.)
long long extra_param_count(EncodingKind kind, int d, int r_s, int r_a, int D);

// How many distinct stored relative-position vectors the variant keeps.
// ddrp factors its table into r_s distance rows plus 3 direction rows.
int distinct_relative_vector_count(EncodingKind kind, int r_s);

}  // namespace tlab
