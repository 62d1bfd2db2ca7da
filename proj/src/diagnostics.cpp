#include "tlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "tlab/checkpoint.hpp"
#include "tlab/error.hpp"
#include "tlab/objectives.hpp"

namespace tlab {

std::string to_string(WeightSpace space) {
  return space == WeightSpace::pre_softmax ? "pre_softmax" : "post_softmax";
}

WeightSpace weight_space_from_string(const std::string& s) {
  if (s == "pre_softmax") return WeightSpace::pre_softmax;
  if (s == "post_softmax") return WeightSpace::post_softmax;
  throw ConfigError("unknown weight space '" + s +
                    "' (expected pre_softmax or post_softmax)");
}

std::optional<double> token_self_similarity(const Tensor& last_hidden) {
  const int n = last_hidden.rows();
  if (n < 2) return std::nullopt;
  const int d = last_hidden.cols();
  auto all = last_hidden.data();
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      acc += cosine_value(all.subspan(static_cast<size_t>(i) * d, d),
                          all.subspan(static_cast<size_t>(j) * d, d));
  // same normalization expression as the TCD loss, for bit equality
  return acc * (2.0 / (static_cast<double>(n) * (n - 1)));
}

std::optional<double> head_self_similarity(
    const std::vector<std::vector<Tensor>>& maps) {
  const int layers = static_cast<int>(maps.size());
  if (layers < 1) return std::nullopt;
  const int m = static_cast<int>(maps[0].size());
  if (m < 2) return std::nullopt;
  double acc = 0.0;
  for (int l = 0; l < layers; ++l) {
    if (static_cast<int>(maps[l].size()) != m)
      throw std::invalid_argument("head_self_similarity: ragged layers");
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j)
        acc += cosine_value(maps[l][i].data(), maps[l][j].data());
  }
  // same normalization expression as the HCD loss, for bit equality
  return acc * (2.0 / (static_cast<double>(layers) * m * (m - 1)));
}

Tensor sentence_group_map(const Encoder& enc, const ForwardTrace& trace,
                          int group) {
  const auto& cfg = enc.config();
  if (group < 0 || group >= cfg.group_count)
    throw ConfigError("group index out of range");
  if (trace.attn_probs.empty() || trace.attn_probs[0].empty())
    throw std::invalid_argument("trace has no attention maps");
  const int len = trace.attn_probs[0][0].rows();
  std::vector<double> acc(static_cast<size_t>(len) * len, 0.0);
  long long contributors = 0;
  for (const auto& layer : trace.attn_probs) {
    for (int h = 0; h < static_cast<int>(layer.size()); ++h) {
      if (enc.group_of_head(h) != group) continue;
      const auto d = layer[h].data();
      for (size_t k = 0; k < acc.size(); ++k) acc[k] += d[k];
      ++contributors;
    }
  }
  if (contributors == 0) throw ConfigError("group has no heads");
  for (double& v : acc) v /= static_cast<double>(contributors);
  return Tensor::from_data({len, len}, std::move(acc));
}

Tensor group_attention_map(const Encoder& enc,
                           const std::vector<ForwardTrace>& traces, int group,
                           int ms) {
  if (traces.empty()) throw InputError("group_attention_map: empty batch");
  if (ms < 1) throw ConfigError("ms must be positive");
  std::vector<double> acc(static_cast<size_t>(ms) * ms, 0.0);
  std::vector<long long> row_count(ms, 0);
  for (const auto& trace : traces) {
    Tensor m = sentence_group_map(enc, trace, group);
    const int len = std::min(m.rows(), ms);
    for (int i = 0; i < len; ++i) {
      ++row_count[i];
      for (int j = 0; j < len; ++j)
        acc[static_cast<size_t>(i) * ms + j] += m.at(i, j);
    }
  }
  for (int i = 0; i < ms; ++i) {
    if (row_count[i] == 0) continue;
    for (int j = 0; j < ms; ++j)
      acc[static_cast<size_t>(i) * ms + j] /= static_cast<double>(row_count[i]);
  }
  return Tensor::from_data({ms, ms}, std::move(acc));
}

namespace {

// Strict-triangle mass shares of a square map, over its leading len x len
// block, divided by `divisor`.
std::pair<double, double> triangle_shares(const Tensor& map, int len,
                                          double divisor) {
  double up = 0.0, down = 0.0;
  for (int i = 0; i < len; ++i) {
    for (int j = 0; j < len; ++j) {
      if (j > i)
        up += map.at(i, j);
      else if (j < i)
        down += map.at(i, j);
    }
  }
  return {up / divisor, down / divisor};
}

}  // namespace

TriangleReport triangle_from_maps(
    const std::vector<std::array<Tensor, 2>>& sentence_maps, double t, int ms,
    bool divide_by_ms) {
  if (sentence_maps.empty()) throw InputError("triangle: empty dataset");
  if (ms < 2) throw ConfigError("ms must be at least 2");

  struct Shares {
    double up[2], down[2];
  };
  std::vector<Shares> shares;
  shares.reserve(sentence_maps.size());
  double total_up[2] = {0.0, 0.0};
  for (const auto& pair : sentence_maps) {
    Shares s{};
    if (pair[0].rows() != pair[1].rows())
      throw std::invalid_argument("triangle: group maps differ in size");
    for (int g = 0; g < 2; ++g) {
      const Tensor& map = pair[g];
      if (map.rows() != map.cols())
        throw std::invalid_argument("triangle: maps must be square");
      const int len = std::min(map.rows(), ms);
      if (len < 2) throw InputError("triangle: sentence shorter than 2 tokens");
      const double divisor = divide_by_ms ? static_cast<double>(ms)
                                          : static_cast<double>(len);
      auto [up, down] = triangle_shares(map, len, divisor);
      s.up[g] = up;
      s.down[g] = down;
      total_up[g] += up;
    }
    shares.push_back(s);
  }

  // the upper-triangle-heavy group is reported as group 1, fixed for the
  // whole dataset
  const int g1 = total_up[0] >= total_up[1] ? 0 : 1;
  const int g2 = 1 - g1;
  int matched = 0;
  for (const auto& s : shares)
    if (s.up[g1] >= t && s.down[g2] >= t) ++matched;

  TriangleReport rep;
  rep.sentences = static_cast<int>(sentence_maps.size());
  rep.matched = matched;
  rep.percentage = 100.0 * matched / rep.sentences;
  rep.t = t;
  rep.ms = ms;
  rep.group1_physical = g1;
  rep.divide_by_ms = divide_by_ms;
  return rep;
}

TriangleReport triangle_percentage(const Encoder& enc,
                                   const std::vector<std::vector<int>>& sentences,
                                   double t, int ms, bool divide_by_ms) {
  if (enc.config().group_count != 2)
    throw ConfigError("triangle counting needs a model with two sharing groups");
  if (sentences.empty()) throw InputError("triangle: empty dataset");
  NoGradGuard ng;
  std::vector<std::array<Tensor, 2>> maps;
  maps.reserve(sentences.size());
  for (const auto& ids : sentences) {
    ForwardTrace trace = enc.forward(ids, RunMode::eval);
    maps.push_back({sentence_group_map(enc, trace, 0),
                    sentence_group_map(enc, trace, 1)});
  }
  return triangle_from_maps(maps, t, ms, divide_by_ms);
}

SimilarityReport similarity_snapshot(const Encoder& enc,
                                     const std::vector<std::vector<int>>& sentences,
                                     WeightSpace space, long long step) {
  if (sentences.empty()) throw InputError("similarity: empty sentence set");
  NoGradGuard ng;
  SimilarityReport rep;
  rep.step = step;
  double fs_acc = 0.0, fh_acc = 0.0;
  int used = 0;
  for (const auto& ids : sentences) {
    ForwardTrace trace = enc.forward(ids, RunMode::eval);
    auto fs = token_self_similarity(trace.last_hidden);
    auto fh = head_self_similarity(space == WeightSpace::pre_softmax
                                       ? trace.attn_weights
                                       : trace.attn_probs);
    if (!fs || !fh) continue;
    fs_acc += *fs;
    fh_acc += *fh;
    ++used;
  }
  if (used == 0) throw InputError("similarity: no usable sentences");
  rep.mean_fs = fs_acc / used;
  rep.mean_fh = fh_acc / used;
  rep.sentence_count = used;
  return rep;
}

std::vector<SimilarityReport> similarity_curve(
    const std::vector<std::string>& checkpoint_paths,
    const std::vector<std::vector<int>>& sentences, int sample_size,
    uint64_t seed, WeightSpace space) {
  if (checkpoint_paths.empty()) throw InputError("similarity: no checkpoints");
  if (sentences.empty()) throw InputError("similarity: empty sentence set");

  const int available = static_cast<int>(sentences.size());
  int want = sample_size > 0 ? sample_size : std::min(5000, available);
  Rng rng(seed);
  std::vector<int> picks = sample_tokens(available, want, rng);
  std::vector<std::vector<int>> sample;
  sample.reserve(picks.size());
  for (int idx : picks) sample.push_back(sentences[idx]);

  std::vector<SimilarityReport> out;
  std::string base_config;
  for (const auto& path : checkpoint_paths) {
    Checkpoint ckpt = load_checkpoint(path);
    const std::string cfg_text = ckpt.config.serialize();
    if (base_config.empty())
      base_config = cfg_text;
    else if (cfg_text != base_config)
      throw ConfigError("checkpoint " + path +
                        " was trained with a different model config");
    Encoder enc(ckpt.config);
    restore_params(enc, ckpt);
    long long step = 0;
    if (auto it = ckpt.state.find("step"); it != ckpt.state.end())
      step = std::stoll(it->second);
    out.push_back(similarity_snapshot(enc, sample, space, step));
  }
  return out;
}

}  // namespace tlab
