#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tlab/relpos.hpp"
#include "tlab/tensor.hpp"

namespace tlab {

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int hidden = 32;
  int vocab_size = 100;
  int max_len = 32;
  int r_s = 64;  // max relative distance before clipping
  int r_a = 64;  // absolute position table length
  EncodingKind encoding = EncodingKind::absolute;
  int group_count = 1;  // relative-parameter sharing groups over heads
  double dropout = 0.1;
  bool tie_mlm_weights = true;
  // Allocate relative parameters per layer instead of sharing one set
  // across layers. Off by default; sharing keeps the ddrp table at its
  // minimal r_s + 3 vectors for the whole model.
  bool per_layer_relpos = false;

  int head_dim() const { return hidden / heads; }
  int ffn_dim() const { return 4 * hidden; }

  void validate() const;
  std::string serialize() const;
  static ModelConfig deserialize(const std::string& text);

  static ModelConfig tiny_preset();
  static ModelConfig small_preset();
  static ModelConfig grad_check_preset();
};

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool decay;  // participates in weight decay
};

// Ordered, named parameter container. Registration order is the iteration
// order everywhere (init, optimizer, checkpoints), which keeps every
// rng-consuming pass deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t, bool decay);
  bool has(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  size_t total_size() const;

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

enum class RunMode { train, eval };

struct ForwardTrace {
  Tensor logits;       // [S x V]
  Tensor last_hidden;  // [S x D]
  // Pre-softmax attention logits and post-softmax probabilities,
  // [layer][head], each [S x S].
  std::vector<std::vector<Tensor>> attn_weights;
  std::vector<std::vector<Tensor>> attn_probs;
};

// Post-layernorm transformer encoder with a masked-token prediction head.
// Sequences run at their true length; callers strip padding beforehand.
class Encoder {
 public:
  explicit Encoder(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Fills weights with truncated normal(0, 0.02) draws (cut at 3 sigma),
  // biases with zero, layernorm gains with one. Deterministic per seed.
  void init(uint64_t seed);

  // mode == train applies dropout, consuming `rng` in a fixed order;
  // eval mode touches no randomness.
  ForwardTrace forward(const std::vector<int>& ids, RunMode mode,
                       Rng* rng = nullptr) const;

  int group_of_head(int head) const;

 private:
  EncodingParams group_params(int layer, int group) const;
  std::string relpos_prefix(int layer, int group) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace tlab
