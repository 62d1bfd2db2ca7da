#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tlab/model.hpp"

namespace tlab {

// On-disk training snapshot. Everything needed to resume bit-identically:
// model config text, vocabulary, named f64 arrays (parameters and optimizer
// moments, in registration order), and a sorted string map for scalar state
// (step counters, rng state, loss accumulators, run config echo).
struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> vocab_words;
  std::map<std::string, std::string> state;
  std::vector<std::pair<std::string, std::vector<double>>> arrays;

  const std::vector<double>* find_array(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies every model parameter into/out of the array list by name.
void store_params(Checkpoint& ckpt, const ParamStore& params);
void restore_params(Encoder& enc, const Checkpoint& ckpt);

}  // namespace tlab
