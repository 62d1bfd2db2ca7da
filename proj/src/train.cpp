#include "tlab/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tlab/error.hpp"
#include "tlab/token_ids.hpp"

namespace tlab {

Objective objective_from_string(const std::string& s) {
  if (s == "mlm") return Objective::mlm;
  if (s == "mth") return Objective::mth;
  throw ConfigError("unknown objective '" + s + "' (expected mlm or mth)");
}

std::string to_string(Objective o) {
  return o == Objective::mlm ? "mlm" : "mth";
}

// ---- run configuration -----------------------------------------------------

namespace {

std::string trim_ws(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

long long parse_ll(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + v + "'");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  long long x = parse_ll(key, v);
  if (x < INT32_MIN || x > INT32_MAX)
    throw ConfigError("integer out of range for " + key + ": '" + v + "'");
  return static_cast<int>(x);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    unsigned long long x = std::stoull(v, &used);
    if (used != v.size() || v.empty() || v[0] == '-')
      throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("bad unsigned integer for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("bad flag for " + key + ": '" + v +
                    "' (expected 0/1/true/false)");
}

void apply_key(RunConfig& c, const std::string& key, const std::string& v) {
  // model
  if (key == "preset") {
    if (v == "tiny") c.model = ModelConfig::tiny_preset();
    else if (v == "small") c.model = ModelConfig::small_preset();
    else if (v == "grad_check") c.model = ModelConfig::grad_check_preset();
    else throw ConfigError("unknown preset '" + v + "'");
  } else if (key == "layers") c.model.layers = parse_int(key, v);
  else if (key == "heads") c.model.heads = parse_int(key, v);
  else if (key == "hidden") c.model.hidden = parse_int(key, v);
  else if (key == "vocab_size") c.model.vocab_size = parse_int(key, v);
  else if (key == "max_len") c.model.max_len = parse_int(key, v);
  else if (key == "r_s") c.model.r_s = parse_int(key, v);
  else if (key == "r_a") c.model.r_a = parse_int(key, v);
  else if (key == "encoding_kind") c.model.encoding = encoding_kind_from_string(v);
  else if (key == "group_count") c.model.group_count = parse_int(key, v);
  else if (key == "dropout") c.model.dropout = parse_double(key, v);
  else if (key == "tie_mlm_weights") c.model.tie_mlm_weights = parse_bool(key, v);
  else if (key == "per_layer_relpos") c.model.per_layer_relpos = parse_bool(key, v);
  // objective
  else if (key == "objective") c.train.objective = objective_from_string(v);
  else if (key == "mask_ratio") c.train.mask_ratio = parse_double(key, v);
  else if (key == "alpha1") c.train.alpha1 = parse_double(key, v);
  else if (key == "alpha2") c.train.alpha2 = parse_double(key, v);
  else if (key == "n_prime") c.train.n_prime = parse_int(key, v);
  else if (key == "m_prime") c.train.m_prime = parse_int(key, v);
  else if (key == "hcd_weight_space") c.train.hcd_weight_space = weight_space_from_string(v);
  else if (key == "triangle_t") c.train.triangle_t = parse_double(key, v);
  // schedule
  else if (key == "step_max") c.train.step_max = parse_ll(key, v);
  else if (key == "batch_size") c.train.batch_size = parse_int(key, v);
  else if (key == "log_interval") c.train.log_interval = parse_ll(key, v);
  else if (key == "checkpoint_interval") c.train.checkpoint_interval = parse_ll(key, v);
  else if (key == "seed") c.train.seed = parse_u64(key, v);
  // optimizer
  else if (key == "peak_lr") c.optim.peak_lr = parse_double(key, v);
  else if (key == "warmup_ratio") c.optim.warmup_ratio = parse_double(key, v);
  else if (key == "adam_beta1") c.optim.beta1 = parse_double(key, v);
  else if (key == "adam_beta2") c.optim.beta2 = parse_double(key, v);
  else if (key == "adam_eps") c.optim.eps = parse_double(key, v);
  else if (key == "weight_decay") c.optim.weight_decay = parse_double(key, v);
  else if (key == "clip_norm") c.optim.clip_norm = parse_double(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string double_bits_hex(double v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(std::bit_cast<uint64_t>(v)));
  return buf;
}

double double_from_bits_hex(const std::string& s) {
  return std::bit_cast<double>(
      static_cast<uint64_t>(std::stoull(s, nullptr, 16)));
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(std::isfinite(optim.peak_lr) && optim.peak_lr > 0.0,
          "peak_lr must be positive");
  require(optim.warmup_ratio >= 0.0 && optim.warmup_ratio <= 0.5,
          "warmup_ratio must be in [0, 0.5]");
  require(optim.beta1 >= 0.0 && optim.beta1 < 1.0, "adam_beta1 must be in [0, 1)");
  require(optim.beta2 >= 0.0 && optim.beta2 < 1.0, "adam_beta2 must be in [0, 1)");
  require(std::isfinite(optim.eps) && optim.eps > 0.0, "adam_eps must be positive");
  require(std::isfinite(optim.weight_decay), "weight_decay must be finite");
  require(std::isfinite(optim.clip_norm), "clip_norm must be finite");
  require(train.mask_ratio >= 0.0 && train.mask_ratio <= 1.0,
          "mask_ratio must be in [0, 1]");
  require(std::isfinite(train.alpha1) && std::isfinite(train.alpha2),
          "alpha1/alpha2 must be finite");
  require(train.n_prime >= 0, "n_prime must be non-negative");
  require(train.m_prime >= 0, "m_prime must be non-negative");
  require(train.triangle_t >= 0.0 && train.triangle_t <= 1.0,
          "triangle_t must be in [0, 1]");
  require(train.step_max >= 1, "step_max must be at least 1");
  require(train.batch_size >= 1, "batch_size must be at least 1");
  require(train.log_interval >= 1, "log_interval must be at least 1");
  require(train.checkpoint_interval >= 0,
          "checkpoint_interval must be non-negative");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "layers = " << model.layers << "\n";
  os << "heads = " << model.heads << "\n";
  os << "hidden = " << model.hidden << "\n";
  os << "vocab_size = " << model.vocab_size << "\n";
  os << "max_len = " << model.max_len << "\n";
  os << "r_s = " << model.r_s << "\n";
  os << "r_a = " << model.r_a << "\n";
  os << "encoding_kind = " << to_string(model.encoding) << "\n";
  os << "group_count = " << model.group_count << "\n";
  os << "dropout = " << fmt_g17(model.dropout) << "\n";
  os << "tie_mlm_weights = " << (model.tie_mlm_weights ? 1 : 0) << "\n";
  os << "per_layer_relpos = " << (model.per_layer_relpos ? 1 : 0) << "\n";
  os << "objective = " << to_string(train.objective) << "\n";
  os << "mask_ratio = " << fmt_g17(train.mask_ratio) << "\n";
  os << "alpha1 = " << fmt_g17(train.alpha1) << "\n";
  os << "alpha2 = " << fmt_g17(train.alpha2) << "\n";
  os << "n_prime = " << train.n_prime << "\n";
  os << "m_prime = " << train.m_prime << "\n";
  os << "hcd_weight_space = " << to_string(train.hcd_weight_space) << "\n";
  os << "triangle_t = " << fmt_g17(train.triangle_t) << "\n";
  os << "step_max = " << train.step_max << "\n";
  os << "batch_size = " << train.batch_size << "\n";
  os << "log_interval = " << train.log_interval << "\n";
  os << "checkpoint_interval = " << train.checkpoint_interval << "\n";
  os << "seed = " << train.seed << "\n";
  os << "peak_lr = " << fmt_g17(optim.peak_lr) << "\n";
  os << "warmup_ratio = " << fmt_g17(optim.warmup_ratio) << "\n";
  os << "adam_beta1 = " << fmt_g17(optim.beta1) << "\n";
  os << "adam_beta2 = " << fmt_g17(optim.beta2) << "\n";
  os << "adam_eps = " << fmt_g17(optim.eps) << "\n";
  os << "weight_decay = " << fmt_g17(optim.weight_decay) << "\n";
  os << "clip_norm = " << fmt_g17(optim.clip_norm) << "\n";
  return os.str();
}

RunConfig RunConfig::deserialize(const std::string& text) {
  RunConfig out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim_ws(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key = value, got '" + line + "'");
    std::string key = trim_ws(line.substr(0, eq));
    std::string val = trim_ws(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("missing key in '" + line + "'");
    apply_key(out, key, val);
  }
  return out;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

// ---- schedule and optimizer -------------------------------------------------

double lr_at(long long step, long long step_max, const OptimizerConfig& oc) {
  const long long w =
      std::llround(oc.warmup_ratio * static_cast<double>(step_max));
  if (step <= w)
    return oc.peak_lr * static_cast<double>(step) / static_cast<double>(w);
  if (step_max <= w) return 0.0;
  return oc.peak_lr * static_cast<double>(step_max - step) /
         static_cast<double>(step_max - w);
}

double global_grad_norm(const ParamStore& params) {
  double ss = 0.0;
  for (const auto& e : params.entries())
    for (double g : e.tensor.grad()) ss += g * g;
  return std::sqrt(ss);
}

double clip_gradients(ParamStore& params, double clip_norm) {
  const double norm = global_grad_norm(params);
  if (clip_norm > 0.0 && norm > clip_norm) {
    const double s = clip_norm / norm;
    for (auto& e : params.entries()) {
      if (!e.tensor.has_grad()) continue;
      for (double& g : e.tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

AdamW::AdamW(ParamStore& params, OptimizerConfig cfg)
    : params_(&params), cfg_(cfg) {
  for (const auto& e : params.entries()) {
    m_.emplace_back(e.tensor.size(), 0.0);
    v_.emplace_back(e.tensor.size(), 0.0);
  }
}

void AdamW::apply(long long step, double lr) {
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step));
  auto& entries = params_->entries();
  for (size_t p = 0; p < entries.size(); ++p) {
    auto data = entries[p].tensor.mutable_data();
    auto grad = entries[p].tensor.grad();
    const bool decay = entries[p].decay;
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < data.size(); ++i) {
      const double g = i < grad.size() ? grad[i] : 0.0;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (decay) update += cfg_.weight_decay * data[i];
      data[i] -= lr * update;
    }
  }
}

void AdamW::store(Checkpoint& ckpt) const {
  const auto& entries = params_->entries();
  for (size_t p = 0; p < entries.size(); ++p) {
    ckpt.arrays.emplace_back("adam.m." + entries[p].name, m_[p]);
    ckpt.arrays.emplace_back("adam.v." + entries[p].name, v_[p]);
  }
}

void AdamW::restore(const Checkpoint& ckpt) {
  const auto& entries = params_->entries();
  for (size_t p = 0; p < entries.size(); ++p) {
    const auto* m = ckpt.find_array("adam.m." + entries[p].name);
    const auto* v = ckpt.find_array("adam.v." + entries[p].name);
    if (!m || !v)
      throw InputError("checkpoint lacks optimizer moments for " +
                       entries[p].name);
    if (m->size() != m_[p].size() || v->size() != v_[p].size())
      throw InputError("optimizer moment size mismatch for " +
                       entries[p].name);
    m_[p] = *m;
    v_[p] = *v;
  }
}

// ---- training loop ----------------------------------------------------------

std::string format_metrics_line(long long step, double lr,
                                const LossBreakdown& loss) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"step\":%lld,\"lr\":%.17g,\"mlm\":%.17g,\"tcd\":%.17g,"
                "\"hcd\":%.17g,\"T\":%.17g,\"total\":%.17g}",
                step, lr, loss.mlm, loss.tcd, loss.hcd, loss.T, loss.total);
  return buf;
}

namespace {

std::string checkpoint_name(long long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%08lld.bin", step);
  return buf;
}

// Pads sit only at the tail; everything before them runs through the model.
void trim_padding(const PackedSequence& seq, std::vector<int>& ids,
                  std::vector<int>& word_ids) {
  size_t len = seq.ids.size();
  while (len > 0 && seq.ids[len - 1] == kPadId) --len;
  ids.assign(seq.ids.begin(), seq.ids.begin() + len);
  word_ids.assign(seq.word_ids.begin(), seq.word_ids.begin() + len);
}

}  // namespace

TrainResult train(const RunConfig& cfg_in, const Corpus& corpus,
                  const std::string& out_dir, const std::string& resume_from) {
  RunConfig cfg = cfg_in;
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = corpus.vocab.size();
  if (cfg.model.vocab_size != corpus.vocab.size())
    throw ConfigError("vocab_size " + std::to_string(cfg.model.vocab_size) +
                      " does not match corpus vocabulary (" +
                      std::to_string(corpus.vocab.size()) + ")");
  cfg.validate();

  const auto packs = pack_sequences(corpus.documents, cfg.model.max_len);
  if (packs.empty()) throw InputError("corpus packs to zero sequences");

  Encoder enc(cfg.model);
  AdamW opt(enc.params(), cfg.optim);
  Rng rng(cfg.train.seed + 1);
  long long start = 0;
  double loss_sum = 0.0;
  long long loss_count = 0;

  if (!resume_from.empty()) {
    Checkpoint ck = load_checkpoint(resume_from);
    auto it = ck.state.find("run_config");
    if (it == ck.state.end() || it->second != cfg.serialize())
      throw ConfigError("resume checkpoint was written by a different config");
    if (ck.vocab_words != corpus.vocab.words)
      throw ConfigError("resume checkpoint vocabulary does not match corpus");
    restore_params(enc, ck);
    opt.restore(ck);
    rng.load_state(ck.state.at("rng"));
    start = std::stoll(ck.state.at("step"));
    if (auto ls = ck.state.find("loss_sum_bits"); ls != ck.state.end())
      loss_sum = double_from_bits_hex(ls->second);
    if (auto lc = ck.state.find("loss_count"); lc != ck.state.end())
      loss_count = std::stoll(lc->second);
    if (start >= cfg.train.step_max)
      throw ConfigError("checkpoint is already at step " +
                        std::to_string(start));
  } else {
    enc.init(cfg.train.seed);
  }

  std::filesystem::create_directories(out_dir);
  TrainResult res;
  res.metrics_path = out_dir + "/metrics.jsonl";
  std::ofstream metrics(res.metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw InputError("cannot write " + res.metrics_path);

  const long long ckpt_interval =
      cfg.train.checkpoint_interval > 0
          ? cfg.train.checkpoint_interval
          : std::max<long long>(1, cfg.train.step_max / 10);
  const bool tcd_on =
      cfg.train.objective == Objective::mth && cfg.train.alpha1 != 0.0;
  const bool hcd_on =
      cfg.train.objective == Objective::mth && cfg.train.alpha2 != 0.0;
  const int batch = cfg.train.batch_size;

  auto last_tick = std::chrono::steady_clock::now();
  std::vector<int> ids, word_ids;
  for (long long s = start + 1; s <= cfg.train.step_max; ++s) {
    std::vector<Tensor> mlms, tcds, hcds;
    for (int b = 0; b < batch; ++b) {
      const auto& seq =
          packs[(static_cast<size_t>(s - 1) * batch + b) % packs.size()];
      trim_padding(seq, ids, word_ids);
      const MaskingPlan plan = plan_whole_word_masking(
          ids, word_ids, cfg.train.mask_ratio, cfg.model.vocab_size, rng);
      const std::vector<int> corrupted = apply_masking(ids, plan);
      const ForwardTrace trace = enc.forward(corrupted, RunMode::train, &rng);
      mlms.push_back(mlm_loss(trace.logits, plan, &res.warnings));
      if (tcd_on) {
        const auto picks = sample_tokens(static_cast<int>(ids.size()),
                                         cfg.train.n_prime, rng);
        tcds.push_back(tcd_loss(trace.last_hidden, picks, &res.warnings));
      }
      if (hcd_on) {
        const auto heads = sample_heads(cfg.model.heads, cfg.train.m_prime,
                                        cfg.model.layers, rng);
        const auto& maps =
            cfg.train.hcd_weight_space == WeightSpace::pre_softmax
                ? trace.attn_weights
                : trace.attn_probs;
        hcds.push_back(hcd_loss(maps, heads, &res.warnings));
      }
    }
    const Tensor batch_mlm = scale(sum_list(mlms), 1.0 / batch);
    const Tensor batch_tcd =
        tcd_on ? scale(sum_list(tcds), 1.0 / batch) : Tensor::scalar(0.0);
    const Tensor batch_hcd =
        hcd_on ? scale(sum_list(hcds), 1.0 / batch) : Tensor::scalar(0.0);
    MthResult step_loss =
        mth_loss(batch_mlm, batch_tcd, batch_hcd, cfg.train.alpha1,
                 cfg.train.alpha2, s - 1, cfg.train.step_max);

    if (!std::isfinite(step_loss.breakdown.total)) {
      metrics.flush();
      throw DivergenceError("non-finite loss at step " + std::to_string(s));
    }
    loss_sum += step_loss.breakdown.total;
    loss_count += 1;

    for (auto& e : enc.params().entries()) e.tensor.zero_grad();
    backward(step_loss.total);
    clip_gradients(enc.params(), cfg.optim.clip_norm);
    const double lr = lr_at(s, cfg.train.step_max, cfg.optim);
    opt.apply(s, lr);

    const bool at_end = s == cfg.train.step_max;
    if (s % cfg.train.log_interval == 0 || at_end) {
      metrics << format_metrics_line(s, lr, step_loss.breakdown) << "\n";
      const auto now = std::chrono::steady_clock::now();
      const double wall_ms =
          std::chrono::duration<double, std::milli>(now - last_tick).count();
      last_tick = now;
      std::printf(
          "step %lld/%lld lr %.3e total %.4f mlm %.4f tcd %.4f hcd %.4f "
          "T %.3f mean %.4f wall_ms %.1f\n",
          s, cfg.train.step_max, lr, step_loss.breakdown.total,
          step_loss.breakdown.mlm, step_loss.breakdown.tcd,
          step_loss.breakdown.hcd, step_loss.breakdown.T,
          loss_sum / static_cast<double>(loss_count), wall_ms);
      std::fflush(stdout);
    }
    if (s % ckpt_interval == 0 || at_end) {
      Checkpoint ck;
      ck.config = cfg.model;
      ck.vocab_words = corpus.vocab.words;
      store_params(ck, enc.params());
      opt.store(ck);
      ck.state["step"] = std::to_string(s);
      ck.state["rng"] = rng.save_state();
      ck.state["run_config"] = cfg.serialize();
      ck.state["loss_sum_bits"] = double_bits_hex(loss_sum);
      ck.state["loss_count"] = std::to_string(loss_count);
      const std::string path = out_dir + "/" + checkpoint_name(s);
      save_checkpoint(path, ck);
      res.checkpoint_paths.push_back(path);
    }
    if (at_end) res.final_loss = step_loss.breakdown;
  }

  res.final_checkpoint_path = res.checkpoint_paths.back();
  return res;
}

}  // namespace tlab
