#pragma once

#include <string>
#include <vector>

#include "tlab/checkpoint.hpp"
#include "tlab/corpus.hpp"
#include "tlab/diagnostics.hpp"
#include "tlab/model.hpp"
#include "tlab/objectives.hpp"

namespace tlab {

enum class Objective { mlm, mth };

Objective objective_from_string(const std::string& s);
std::string to_string(Objective o);

struct OptimizerConfig {
  double peak_lr = 1e-4;
  double warmup_ratio = 0.01;  // fraction of step_max spent warming up
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;  // decoupled; layernorm and bias exempt
  double clip_norm = 1.0;      // <= 0 disables clipping
};

struct TrainConfig {
  Objective objective = Objective::mlm;
  double mask_ratio = 0.15;
  double alpha1 = 1.0;
  double alpha2 = 0.01;
  int n_prime = 50;
  int m_prime = 2;
  WeightSpace hcd_weight_space = WeightSpace::pre_softmax;
  long long step_max = 1000;
  int batch_size = 4;
  long long log_interval = 100;
  long long checkpoint_interval = 0;  // 0: step_max / 10
  uint64_t seed = 0;
  double triangle_t = 0.4;
};

// Flat key=value run description covering model, objective, and optimizer.
// A `preset` line applies a named model preset immediately; later lines
// override individual fields. Unknown keys are configuration errors.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  OptimizerConfig optim;

  void validate() const;
  std::string serialize() const;
  static RunConfig deserialize(const std::string& text);
  static RunConfig parse_file(const std::string& path);
};

// Linear warmup to peak over the first w = round(warmup_ratio * step_max)
// steps, then linear decay hitting exactly zero at step_max. 1-based.
double lr_at(long long step, long long step_max, const OptimizerConfig& oc);

// L2 norm over every parameter gradient in the store (missing grads count
// as zero).
double global_grad_norm(const ParamStore& params);

// Scales all gradients by clip_norm/norm when norm exceeds clip_norm.
// Returns the pre-clip norm. clip_norm <= 0 leaves gradients untouched.
double clip_gradients(ParamStore& params, double clip_norm);

// Decoupled weight decay Adam over the store's registration order. Moments
// are checkpointed as adam.m.<param> / adam.v.<param> arrays.
class AdamW {
 public:
  AdamW(ParamStore& params, OptimizerConfig cfg);

  // One update using the gradients currently on the parameters. `step` is
  // the 1-based global step, used for bias correction.
  void apply(long long step, double lr);

  void store(Checkpoint& ckpt) const;
  void restore(const Checkpoint& ckpt);

 private:
  ParamStore* params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct TrainResult {
  std::string metrics_path;
  std::vector<std::string> checkpoint_paths;  // chronological
  std::string final_checkpoint_path;
  LossBreakdown final_loss;
  WarnCounters warnings;
};

// One JSONL metrics record. Field order and float formatting are fixed so
// equal runs produce byte-equal logs.
std::string format_metrics_line(long long step, double lr,
                                const LossBreakdown& loss);

// Runs the configured pre-training loop over the corpus, writing
// out_dir/metrics.jsonl and periodic out_dir/ckpt_<step>.bin snapshots.
// Same config, corpus, and seed give byte-identical outputs. resume_from
// restores a checkpoint written by an identical config and continues it;
// the continued run's outputs match the uninterrupted run's bit for bit.
// A non-finite loss aborts with DivergenceError naming the step.
TrainResult train(const RunConfig& cfg, const Corpus& corpus,
                  const std::string& out_dir,
                  const std::string& resume_from = "");

}  // namespace tlab
