#include "tlab/model.hpp"

#include <cmath>
#include <sstream>

#include "tlab/error.hpp"

namespace tlab {

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("layers must be positive");
  if (heads < 1) throw ConfigError("heads must be positive");
  if (hidden < 1 || hidden % heads != 0)
    throw ConfigError("hidden must be a positive multiple of heads");
  if (vocab_size < 5)
    throw ConfigError("vocab_size must cover the five reserved tokens");
  if (max_len < 1) throw ConfigError("max_len must be positive");
  if (r_s < 1) throw ConfigError("r_s must be positive");
  if (r_a < 1) throw ConfigError("r_a must be positive");
  const bool uses_absolute =
      encoding == EncodingKind::absolute || encoding == EncodingKind::tupe;
  if (uses_absolute && max_len > r_a)
    throw ConfigError("max_len exceeds the absolute position table (r_a)");
  if (group_count != 1 && group_count != 2)
    throw ConfigError("group_count must be 1 or 2");
  if (heads % group_count != 0)
    throw ConfigError("group_count must divide heads");
  if (dropout < 0.0 || dropout >= 1.0)
    throw ConfigError("dropout must lie in [0, 1)");
  // The decoupled table is the compact option at every shipped width.
  if (encoding == EncodingKind::ddrp && head_dim() <= 3 * r_s - 4 &&
      extra_param_count(EncodingKind::ddrp, head_dim(), r_s, r_a, hidden) >=
          extra_param_count(EncodingKind::deberta, head_dim(), r_s, r_a,
                            hidden))
    throw ConfigError("ddrp parameter accounting is inconsistent");
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "layers=" << layers << '\n'
     << "heads=" << heads << '\n'
     << "hidden=" << hidden << '\n'
     << "vocab_size=" << vocab_size << '\n'
     << "max_len=" << max_len << '\n'
     << "r_s=" << r_s << '\n'
     << "r_a=" << r_a << '\n'
     << "encoding=" << to_string(encoding) << '\n'
     << "group_count=" << group_count << '\n'
     << "dropout=" << dropout << '\n'
     << "tie_mlm_weights=" << (tie_mlm_weights ? 1 : 0) << '\n'
     << "per_layer_relpos=" << (per_layer_relpos ? 1 : 0) << '\n';
  return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("malformed model config line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    try {
      if (key == "layers")
        cfg.layers = std::stoi(value);
      else if (key == "heads")
        cfg.heads = std::stoi(value);
      else if (key == "hidden")
        cfg.hidden = std::stoi(value);
      else if (key == "vocab_size")
        cfg.vocab_size = std::stoi(value);
      else if (key == "max_len")
        cfg.max_len = std::stoi(value);
      else if (key == "r_s")
        cfg.r_s = std::stoi(value);
      else if (key == "r_a")
        cfg.r_a = std::stoi(value);
      else if (key == "encoding")
        cfg.encoding = encoding_kind_from_string(value);
      else if (key == "group_count")
        cfg.group_count = std::stoi(value);
      else if (key == "dropout")
        cfg.dropout = std::stod(value);
      else if (key == "tie_mlm_weights")
        cfg.tie_mlm_weights = std::stoi(value) != 0;
      else if (key == "per_layer_relpos")
        cfg.per_layer_relpos = std::stoi(value) != 0;
      else
        throw ConfigError("unknown model config key: " + key);
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for model config key " + key);
    }
  }
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::tiny_preset() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 32;
  cfg.vocab_size = 100;
  cfg.max_len = 32;
  cfg.r_s = 64;
  cfg.r_a = 64;
  return cfg;
}

ModelConfig ModelConfig::small_preset() {
  ModelConfig cfg;
  cfg.layers = 4;
  cfg.heads = 4;
  cfg.hidden = 128;
  cfg.vocab_size = 8000;
  cfg.max_len = 64;
  cfg.r_s = 64;
  cfg.r_a = 64;
  return cfg;
}

ModelConfig ModelConfig::grad_check_preset() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 16;
  cfg.vocab_size = 23;
  cfg.max_len = 8;
  cfg.r_s = 4;
  cfg.r_a = 8;
  cfg.dropout = 0.0;
  return cfg;
}

Tensor& ParamStore::add(const std::string& name, Tensor t, bool decay) {
  if (index_.count(name))
    throw ConfigError("duplicate parameter name: " + name);
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(t), decay});
  return entries_.back().tensor;
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].tensor;
}

size_t ParamStore::total_size() const {
  size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

namespace {

Tensor apply_dropout(const Tensor& x, double p, RunMode mode, Rng* rng) {
  if (mode != RunMode::train || p <= 0.0) return x;
  if (!rng) throw std::invalid_argument("train-mode forward needs an rng");
  std::vector<double> mask(x.size());
  const double inv_keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng->uniform() < p ? 0.0 : inv_keep;
  return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

}  // namespace

Encoder::Encoder(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int D = cfg_.hidden;
  const int d = cfg_.head_dim();
  const int F = cfg_.ffn_dim();
  const int V = cfg_.vocab_size;

  params_.add("embed.word", Tensor::zeros({V, D}, true), true);
  if (cfg_.encoding == EncodingKind::absolute)
    params_.add("embed.pos", Tensor::zeros({cfg_.r_a, D}, true), true);
  params_.add("embed.norm.gain", Tensor::zeros({D}, true), false);
  params_.add("embed.norm.bias", Tensor::zeros({D}, true), false);

  const int relpos_sets = cfg_.per_layer_relpos ? cfg_.layers : 1;
  for (int set = 0; set < relpos_sets; ++set) {
    for (int g = 0; g < cfg_.group_count; ++g) {
      const std::string prefix = relpos_prefix(cfg_.per_layer_relpos ? set : -1, g);
      switch (cfg_.encoding) {
        case EncodingKind::absolute:
          break;  // handled at the embedding layer
        case EncodingKind::shaw:
          params_.add(prefix + "rel_key", Tensor::zeros({2 * cfg_.r_s, d}, true),
                      true);
          break;
        case EncodingKind::tupe:
          params_.add(prefix + "pos_table", Tensor::zeros({cfg_.r_a, D}, true),
                      true);
          params_.add(prefix + "pos_query_proj", Tensor::zeros({D, d}, true),
                      true);
          params_.add(prefix + "pos_key_proj", Tensor::zeros({D, d}, true),
                      true);
          params_.add(prefix + "rel_bias", Tensor::zeros({2 * cfg_.r_s}, true),
                      false);
          break;
        case EncodingKind::deberta:
          params_.add(prefix + "rel_key", Tensor::zeros({2 * cfg_.r_s, d}, true),
                      true);
          params_.add(prefix + "rel_query",
                      Tensor::zeros({2 * cfg_.r_s, d}, true), true);
          break;
        case EncodingKind::ddrp:
          params_.add(prefix + "dir_embed", Tensor::zeros({3, d}, true), true);
          params_.add(prefix + "dist_embed", Tensor::zeros({cfg_.r_s, d}, true),
                      true);
          params_.add(prefix + "dir_dist_proj", Tensor::zeros({d, d}, true),
                      true);
          break;
      }
    }
  }

  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    for (int h = 0; h < cfg_.heads; ++h) {
      const std::string hp = lp + "attn.head" + std::to_string(h) + ".";
      params_.add(hp + "wq", Tensor::zeros({D, d}, true), true);
      params_.add(hp + "bq", Tensor::zeros({d}, true), false);
      params_.add(hp + "wk", Tensor::zeros({D, d}, true), true);
      params_.add(hp + "bk", Tensor::zeros({d}, true), false);
      params_.add(hp + "wv", Tensor::zeros({D, d}, true), true);
      params_.add(hp + "bv", Tensor::zeros({d}, true), false);
    }
    params_.add(lp + "attn.wo", Tensor::zeros({D, D}, true), true);
    params_.add(lp + "attn.bo", Tensor::zeros({D}, true), false);
    params_.add(lp + "attn.norm.gain", Tensor::zeros({D}, true), false);
    params_.add(lp + "attn.norm.bias", Tensor::zeros({D}, true), false);
    params_.add(lp + "ffn.w1", Tensor::zeros({D, F}, true), true);
    params_.add(lp + "ffn.b1", Tensor::zeros({F}, true), false);
    params_.add(lp + "ffn.w2", Tensor::zeros({F, D}, true), true);
    params_.add(lp + "ffn.b2", Tensor::zeros({D}, true), false);
    params_.add(lp + "ffn.norm.gain", Tensor::zeros({D}, true), false);
    params_.add(lp + "ffn.norm.bias", Tensor::zeros({D}, true), false);
  }

  if (!cfg_.tie_mlm_weights)
    params_.add("mlm.proj", Tensor::zeros({V, D}, true), true);
  params_.add("mlm.bias", Tensor::zeros({V}, true), false);
}

std::string Encoder::relpos_prefix(int layer, int group) const {
  std::string p = "relpos.";
  if (layer >= 0) p += "l" + std::to_string(layer) + ".";
  return p + "g" + std::to_string(group) + ".";
}

void Encoder::init(uint64_t seed) {
  Rng rng(seed);
  for (auto& e : params_.entries()) {
    auto data = e.tensor.mutable_data();
    const bool is_gain = e.name.ends_with("norm.gain");
    const bool is_bias = e.name.ends_with("bias") || e.name.ends_with(".bq") ||
                         e.name.ends_with(".bk") || e.name.ends_with(".bv") ||
                         e.name.ends_with(".bo") || e.name.ends_with(".b1") ||
                         e.name.ends_with(".b2");
    if (is_gain) {
      for (auto& x : data) x = 1.0;
    } else if (is_bias) {
      for (auto& x : data) x = 0.0;
    } else {
      for (auto& x : data) x = rng.truncated_normal(0.02);
    }
    e.tensor.zero_grad();
  }
}

int Encoder::group_of_head(int head) const {
  return head * cfg_.group_count / cfg_.heads;
}

EncodingParams Encoder::group_params(int layer, int group) const {
  const std::string prefix =
      relpos_prefix(cfg_.per_layer_relpos ? layer : -1, group);
  EncodingParams p;
  p.kind = cfg_.encoding;
  switch (cfg_.encoding) {
    case EncodingKind::absolute:
      break;
    case EncodingKind::shaw:
      p.rel_key = params_.get(prefix + "rel_key");
      break;
    case EncodingKind::tupe:
      p.abs_pos = params_.get(prefix + "pos_table");
      p.pos_query_proj = params_.get(prefix + "pos_query_proj");
      p.pos_key_proj = params_.get(prefix + "pos_key_proj");
      p.rel_bias = params_.get(prefix + "rel_bias");
      break;
    case EncodingKind::deberta:
      p.rel_key = params_.get(prefix + "rel_key");
      p.rel_query = params_.get(prefix + "rel_query");
      break;
    case EncodingKind::ddrp:
      p.dir_embed = params_.get(prefix + "dir_embed");
      p.dist_embed = params_.get(prefix + "dist_embed");
      p.dir_dist_proj = params_.get(prefix + "dir_dist_proj");
      break;
  }
  return p;
}

ForwardTrace Encoder::forward(const std::vector<int>& ids, RunMode mode,
                              Rng* rng) const {
  const int s = static_cast<int>(ids.size());
  if (s < 1) throw InputError("forward: empty sequence");
  if (s > cfg_.max_len) throw InputError("forward: sequence exceeds max_len");
  for (int id : ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw InputError("forward: token id out of vocabulary");

  const RelPosIndexer indexer(cfg_.r_s);

  Tensor h = embedding_rows(params_.get("embed.word"), ids);
  if (cfg_.encoding == EncodingKind::absolute) {
    std::vector<int> positions(ids.size());
    for (int i = 0; i < s; ++i) positions[i] = i;
    h = add(h, embedding_rows(params_.get("embed.pos"), positions));
  }
  h = layer_norm_rows(h, params_.get("embed.norm.gain"),
                      params_.get("embed.norm.bias"));
  h = apply_dropout(h, cfg_.dropout, mode, rng);

  // One decoupled table per sharing group when parameters are shared across
  // layers; rebuilt per layer otherwise.
  std::vector<Tensor> shared_tables(cfg_.group_count);
  if (cfg_.encoding == EncodingKind::ddrp && !cfg_.per_layer_relpos)
    for (int g = 0; g < cfg_.group_count; ++g) {
      EncodingParams p = group_params(0, g);
      shared_tables[g] = ddrp_table(p.dir_embed, p.dist_embed, p.dir_dist_proj);
    }

  ForwardTrace trace;
  trace.attn_weights.resize(cfg_.layers);
  trace.attn_probs.resize(cfg_.layers);

  for (int l = 0; l < cfg_.layers; ++l) {
    std::vector<Tensor> layer_tables = shared_tables;
    if (cfg_.encoding == EncodingKind::ddrp && cfg_.per_layer_relpos)
      for (int g = 0; g < cfg_.group_count; ++g) {
        EncodingParams p = group_params(l, g);
        layer_tables[g] = ddrp_table(p.dir_embed, p.dist_embed, p.dir_dist_proj);
      }

    const std::string lp = "layer" + std::to_string(l) + ".";
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(cfg_.heads);
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      const std::string hp = lp + "attn.head" + std::to_string(hd) + ".";
      Tensor q = add_rowvec(matmul(h, params_.get(hp + "wq")),
                            params_.get(hp + "bq"));
      Tensor k = add_rowvec(matmul(h, params_.get(hp + "wk")),
                            params_.get(hp + "bk"));
      Tensor v = add_rowvec(matmul(h, params_.get(hp + "wv")),
                            params_.get(hp + "bv"));
      const int g = group_of_head(hd);
      AttentionOutput att;
      switch (cfg_.encoding) {
        case EncodingKind::absolute:
          att = attention_vanilla(q, k, v);
          break;
        case EncodingKind::shaw: {
          att = attention_shaw(q, k, v, group_params(l, g).rel_key, indexer);
          break;
        }
        case EncodingKind::tupe: {
          EncodingParams p = group_params(l, g);
          att = attention_tupe(q, k, v, p.abs_pos, p.pos_query_proj,
                               p.pos_key_proj, p.rel_bias, indexer);
          break;
        }
        case EncodingKind::deberta: {
          EncodingParams p = group_params(l, g);
          att = attention_deberta(q, k, v, p.rel_key, p.rel_query, indexer);
          break;
        }
        case EncodingKind::ddrp:
          att = attention_ddrp(q, k, v, layer_tables[g], indexer);
          break;
      }
      trace.attn_weights[l].push_back(att.weights);
      trace.attn_probs[l].push_back(att.probs);
      Tensor probs = apply_dropout(att.probs, cfg_.dropout, mode, rng);
      head_outputs.push_back(matmul(probs, v));
    }
    Tensor attn_out = concat_cols(head_outputs);
    attn_out = add_rowvec(matmul(attn_out, params_.get(lp + "attn.wo")),
                          params_.get(lp + "attn.bo"));
    attn_out = apply_dropout(attn_out, cfg_.dropout, mode, rng);
    h = layer_norm_rows(add(h, attn_out), params_.get(lp + "attn.norm.gain"),
                        params_.get(lp + "attn.norm.bias"));

    Tensor ffn = add_rowvec(matmul(h, params_.get(lp + "ffn.w1")),
                            params_.get(lp + "ffn.b1"));
    ffn = gelu(ffn);
    ffn = add_rowvec(matmul(ffn, params_.get(lp + "ffn.w2")),
                     params_.get(lp + "ffn.b2"));
    ffn = apply_dropout(ffn, cfg_.dropout, mode, rng);
    h = layer_norm_rows(add(h, ffn), params_.get(lp + "ffn.norm.gain"),
                        params_.get(lp + "ffn.norm.bias"));
  }

  trace.last_hidden = h;
  const Tensor& proj = cfg_.tie_mlm_weights ? params_.get("embed.word")
                                            : params_.get("mlm.proj");
  trace.logits = add_rowvec(matmul_nt(h, proj), params_.get("mlm.bias"));
  return trace;
}

}  // namespace tlab
