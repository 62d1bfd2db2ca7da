#include "tlab/relpos.hpp"

#include <algorithm>
#include <cmath>

#include "tlab/error.hpp"

namespace tlab {

EncodingKind encoding_kind_from_string(const std::string& s) {
  if (s == "absolute") return EncodingKind::absolute;
  if (s == "shaw") return EncodingKind::shaw;
  if (s == "tupe") return EncodingKind::tupe;
  if (s == "deberta") return EncodingKind::deberta;
  if (s == "ddrp") return EncodingKind::ddrp;
  throw ConfigError("unknown encoding kind: " + s);
}

std::string to_string(EncodingKind kind) {
  switch (kind) {
    case EncodingKind::absolute: return "absolute";
    case EncodingKind::shaw: return "shaw";
    case EncodingKind::tupe: return "tupe";
    case EncodingKind::deberta: return "deberta";
    case EncodingKind::ddrp: return "ddrp";
  }
  throw ConfigError("unknown encoding kind value");
}

RelPosIndexer::RelPosIndexer(int r_s) : r_s_(r_s) {
  if (r_s < 1) throw ConfigError("r_s must be positive");
}

int RelPosIndexer::clip(int diff) const {
  return std::clamp(diff, -r_s_, r_s_ - 1);
}

int RelPosIndexer::sigma(int i, int j) const { return clip(i - j) + r_s_; }

std::pair<int, int> RelPosIndexer::delta_rho(int i, int j) const {
  const int diff = std::clamp(i - j, -(r_s_ - 1), r_s_ - 1);
  const int delta = std::abs(diff);
  int rho = 0;
  if (i < j)
    rho = 1;
  else if (i > j)
    rho = 2;
  return {delta, rho};
}

IndexGrid RelPosIndexer::sigma_grid(int s) const {
  IndexGrid g;
  g.rows = s;
  g.cols = s;
  g.v.reserve(static_cast<size_t>(s) * s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) g.v.push_back(sigma(i, j));
  return g;
}

IndexGrid RelPosIndexer::sigma_grid_swapped(int s) const {
  IndexGrid g;
  g.rows = s;
  g.cols = s;
  g.v.reserve(static_cast<size_t>(s) * s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) g.v.push_back(sigma(j, i));
  return g;
}

IndexGrid RelPosIndexer::delta_rho_grid(int s) const {
  IndexGrid g;
  g.rows = s;
  g.cols = s;
  g.v.reserve(static_cast<size_t>(s) * s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      const auto [delta, rho] = delta_rho(i, j);
      g.v.push_back(delta * 3 + rho);
    }
  return g;
}

namespace {

AttentionOutput finish(Tensor weights, const Tensor& v) {
  AttentionOutput out;
  out.weights = std::move(weights);
  out.probs = softmax_rows(out.weights);
  out.output = matmul(out.probs, v);
  return out;
}

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw std::invalid_argument("attention: q/k/v must be 2-D");
  if (q.cols() != k.cols() || q.rows() != k.rows() || k.rows() != v.rows())
    throw std::invalid_argument("attention: q/k/v extents do not agree");
}

}  // namespace

AttentionOutput attention_vanilla(const Tensor& q, const Tensor& k,
                                  const Tensor& v) {
  check_qkv(q, k, v);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return finish(scale(matmul_nt(q, k), inv), v);
}

AttentionOutput attention_shaw(const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& rel_key,
                               const RelPosIndexer& indexer) {
  check_qkv(q, k, v);
  if (rel_key.rows() != 2 * indexer.r_s())
    throw ConfigError("shaw: relative key table must have 2*r_s rows");
  const int s = q.rows();
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor rel = gathered_scores(q, rel_key, indexer.sigma_grid(s), false);
  return finish(scale(add(matmul_nt(q, k), rel), inv), v);
}

AttentionOutput attention_tupe(const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& abs_pos,
                               const Tensor& pos_query_proj,
                               const Tensor& pos_key_proj,
                               const Tensor& rel_bias,
                               const RelPosIndexer& indexer) {
  check_qkv(q, k, v);
  const int s = q.rows();
  if (s > abs_pos.rows())
    throw ConfigError("tupe: sequence longer than the absolute position table");
  if (rel_bias.dim(0) != 2 * indexer.r_s())
    throw ConfigError("tupe: relative bias must have 2*r_s entries");
  std::vector<int> positions(s);
  for (int i = 0; i < s; ++i) positions[i] = i;
  Tensor p = embedding_rows(abs_pos, positions);
  Tensor qp = matmul(p, pos_query_proj);
  Tensor kp = matmul(p, pos_key_proj);
  const double inv = 1.0 / std::sqrt(2.0 * static_cast<double>(q.cols()));
  Tensor mixed = scale(add(matmul_nt(q, k), matmul_nt(qp, kp)), inv);
  Tensor bias = gather_bias(rel_bias, indexer.sigma_grid(s));
  return finish(add(mixed, bias), v);
}

AttentionOutput attention_deberta(const Tensor& q, const Tensor& k,
                                  const Tensor& v, const Tensor& rel_key,
                                  const Tensor& rel_query,
                                  const RelPosIndexer& indexer) {
  check_qkv(q, k, v);
  if (rel_key.rows() != 2 * indexer.r_s() ||
      rel_query.rows() != 2 * indexer.r_s())
    throw ConfigError("deberta: relative tables must have 2*r_s rows");
  const int s = q.rows();
  // content-to-position gathers at sigma(i,j); position-to-content dots k_j
  // against rel_query at sigma(j,i).
  Tensor c2p = gathered_scores(q, rel_key, indexer.sigma_grid(s), false);
  Tensor p2c = gathered_scores(k, rel_query, indexer.sigma_grid_swapped(s), true);
  const double inv = 1.0 / std::sqrt(3.0 * static_cast<double>(q.cols()));
  return finish(scale(add(add(matmul_nt(q, k), c2p), p2c), inv), v);
}

Tensor ddrp_table(const Tensor& dir_embed, const Tensor& dist_embed,
                  const Tensor& dir_dist_proj) {
  if (dir_embed.ndim() != 2 || dir_embed.rows() != 3)
    throw ConfigError("ddrp: direction embedding must have 3 rows");
  if (dist_embed.ndim() != 2 || dist_embed.cols() != dir_embed.cols())
    throw ConfigError("ddrp: distance embedding width must match direction");
  if (dir_dist_proj.ndim() != 2 || dir_dist_proj.rows() != dir_embed.cols() ||
      dir_dist_proj.cols() != dir_embed.cols())
    throw ConfigError("ddrp: projection must be square over the head dim");
  const int r_s = dist_embed.rows();
  std::vector<int> dir_ids, dist_ids;
  dir_ids.reserve(static_cast<size_t>(r_s) * 3);
  dist_ids.reserve(static_cast<size_t>(r_s) * 3);
  for (int delta = 0; delta < r_s; ++delta)
    for (int rho = 0; rho < 3; ++rho) {
      dist_ids.push_back(delta);
      dir_ids.push_back(rho);
    }
  Tensor dir_rows = embedding_rows(dir_embed, dir_ids);
  Tensor dist_rows = embedding_rows(dist_embed, dist_ids);
  return matmul(mul(dir_rows, dist_rows), dir_dist_proj);
}

AttentionOutput attention_ddrp(const Tensor& q, const Tensor& k,
                               const Tensor& v, const Tensor& table,
                               const RelPosIndexer& indexer) {
  check_qkv(q, k, v);
  if (table.rows() != 3 * indexer.r_s())
    throw ConfigError("ddrp: table must have 3*r_s rows");
  const int s = q.rows();
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor rel = gathered_scores(q, table, indexer.delta_rho_grid(s), false);
  return finish(scale(add(matmul_nt(q, k), rel), inv), v);
}

long long extra_param_count(EncodingKind kind, int d, int r_s, int r_a,
                            int D) {
  const long long dl = d, rl = r_s, al = r_a, Dl = D;
  switch (kind) {
    case EncodingKind::absolute:
      return al * Dl;
    case EncodingKind::shaw:
      return 2 * rl * dl;
    case EncodingKind::tupe:
      return al * Dl + 2 * Dl * dl + 2 * rl;
    case EncodingKind::deberta:
      return 2 * (2 * rl * dl);
    case EncodingKind::ddrp:
      return 3 * dl + rl * dl + dl * dl;
  }
  throw ConfigError("unknown encoding kind value");
}

int distinct_relative_vector_count(EncodingKind kind, int r_s) {
  switch (kind) {
    case EncodingKind::absolute:
      return 0;
    case EncodingKind::shaw:
      return 2 * r_s;
    case EncodingKind::tupe:
      return 0;  // scalar biases only
    case EncodingKind::deberta:
      return 4 * r_s;
    case EncodingKind::ddrp:
      return r_s + 3;  // r_s distance rows factored against 3 direction rows
  }
  throw ConfigError("unknown encoding kind value");
}

}  // namespace tlab
