#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tlab/checkpoint.hpp"
#include "tlab/corpus.hpp"
#include "tlab/diagnostics.hpp"
#include "tlab/error.hpp"
#include "tlab/model.hpp"
#include "tlab/objectives.hpp"
#include "tlab/token_ids.hpp"
#include "tlab/train.hpp"

namespace fs = std::filesystem;
using namespace tlab;

namespace {

// ---- shared corpus plumbing -------------------------------------------------

struct CorpusOpts {
  std::string text_path;
  std::string synth_preset;
  int synth_docs = 200;
  uint64_t corpus_seed = 0;
  int vocab_cap = 8000;
  int min_doc_len = 8;
};

void add_corpus_options(CLI::App* sub, CorpusOpts& o) {
  sub->add_option("--corpus", o.text_path,
                  "UTF-8 text file, blank-line separated documents");
  sub->add_option("--synth", o.synth_preset,
                  "synthetic preset: copy-forward, copy-backward, "
                  "bracket-match");
  sub->add_option("--docs", o.synth_docs, "synthetic document count")
      ->check(CLI::PositiveNumber);
  sub->add_option("--corpus-seed", o.corpus_seed,
                  "corpus generation and shuffle seed");
  sub->add_option("--vocab-cap", o.vocab_cap,
                  "vocabulary size cap for text corpora");
  sub->add_option("--min-doc-len", o.min_doc_len,
                  "drop text documents shorter than this many tokens");
}

Corpus make_corpus(const CorpusOpts& o) {
  if (!o.text_path.empty() && !o.synth_preset.empty())
    throw ConfigError("pass either --corpus or --synth, not both");
  if (!o.text_path.empty()) {
    std::ifstream in(o.text_path, std::ios::binary);
    if (!in) throw InputError("cannot open corpus file: " + o.text_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return build_corpus(buf.str(), o.vocab_cap, o.min_doc_len, o.corpus_seed);
  }
  if (!o.synth_preset.empty())
    return synth_directional_corpus(o.synth_preset, o.synth_docs,
                                    o.corpus_seed);
  throw ConfigError("a corpus source is required (--corpus or --synth)");
}

// Packed windows with tail padding stripped; what every diagnostic eats.
std::vector<std::vector<int>> corpus_sentences(const Corpus& corpus,
                                               int max_len) {
  std::vector<std::vector<int>> out;
  for (const auto& p : pack_sequences(corpus.documents, max_len)) {
    size_t len = p.ids.size();
    while (len > 0 && p.ids[len - 1] == kPadId) --len;
    out.emplace_back(p.ids.begin(), p.ids.begin() + len);
  }
  return out;
}

void require_vocab_match(const Checkpoint& ck, const Corpus& corpus) {
  if (ck.vocab_words != corpus.vocab.words)
    throw ConfigError(
        "checkpoint vocabulary does not match the supplied corpus");
}

std::vector<std::string> expand_checkpoint_args(
    const std::vector<std::string>& args) {
  std::vector<std::string> paths;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(a)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("ckpt_", 0) == 0 && name.ends_with(".bin"))
          found.push_back(e.path().string());
      }
      std::sort(found.begin(), found.end());
      paths.insert(paths.end(), found.begin(), found.end());
    } else {
      paths.push_back(a);
    }
  }
  if (paths.empty()) throw InputError("no checkpoints found");
  return paths;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- subcommands ------------------------------------------------------------

struct PretrainArgs {
  std::string config_path;
  std::string out_dir;
  std::string resume;
  uint64_t seed = 0;
  bool seed_given = false;
  CorpusOpts corpus;
};

int run_pretrain(const PretrainArgs& a) {
  RunConfig cfg = RunConfig::parse_file(a.config_path);
  if (a.seed_given) cfg.train.seed = a.seed;
  const Corpus corpus = make_corpus(a.corpus);
  const TrainResult res = train(cfg, corpus, a.out_dir, a.resume);
  std::printf("done: %lld steps, final total %.6f, checkpoint %s\n",
              cfg.train.step_max, res.final_loss.total,
              res.final_checkpoint_path.c_str());
  if (res.warnings.empty_mlm_plan || res.warnings.tcd_too_few ||
      res.warnings.hcd_too_few)
    std::printf("warnings: empty_mlm_plan=%lld tcd_too_few=%lld "
                "hcd_too_few=%lld\n",
                res.warnings.empty_mlm_plan, res.warnings.tcd_too_few,
                res.warnings.hcd_too_few);
  return 0;
}

struct GradCheckArgs {
  std::string preset = "tiny";
  uint64_t seed = 0;
  double h = 1e-4;
  int coords = 4;
  double floor = 1e-5;
  double tolerance = 1e-4;
};

ModelConfig preset_by_name(const std::string& name) {
  if (name == "tiny") return ModelConfig::tiny_preset();
  if (name == "small") return ModelConfig::small_preset();
  if (name == "grad_check") return ModelConfig::grad_check_preset();
  throw ConfigError("unknown preset '" + name + "'");
}

int run_grad_check(const GradCheckArgs& a) {
  const EncodingKind kinds[] = {EncodingKind::absolute, EncodingKind::shaw,
                                EncodingKind::tupe, EncodingKind::deberta,
                                EncodingKind::ddrp};
  bool ok = true;
  for (EncodingKind kind : kinds) {
    ModelConfig mc = preset_by_name(a.preset);
    mc.encoding = kind;
    mc.group_count = mc.heads % 2 == 0 ? 2 : 1;
    mc.dropout = 0.0;
    mc.validate();
    Encoder enc(mc);
    enc.init(a.seed);

    std::vector<int> ids = {kClsId};
    const int content = std::min(10, mc.max_len - 2);
    for (int i = 0; i < content; ++i)
      ids.push_back(kReservedIds + (i * 7) % (mc.vocab_size - kReservedIds));
    ids.push_back(kSepId);

    MaskingPlan plan;
    for (int pos : {2, 4, 5})
      if (pos < static_cast<int>(ids.size()) - 1)
        plan.actions.push_back({pos, ids[static_cast<size_t>(pos)], kMaskId});
    std::vector<int> all_tokens(ids.size());
    for (size_t i = 0; i < ids.size(); ++i)
      all_tokens[i] = static_cast<int>(i);
    std::vector<std::vector<int>> all_heads(
        static_cast<size_t>(mc.layers));
    for (auto& layer : all_heads)
      for (int h = 0; h < mc.heads; ++h) layer.push_back(h);

    auto loss = [&]() {
      ForwardTrace trace = enc.forward(ids, RunMode::eval);
      Tensor mlm = mlm_loss(trace.logits, plan);
      Tensor tcd = tcd_loss(trace.last_hidden, all_tokens);
      Tensor hcd = hcd_loss(trace.attn_weights, all_heads);
      return mth_loss(mlm, tcd, hcd, 1.0, 0.01, 25, 100).total;
    };

    double worst = 0.0;
    Rng coord_rng(a.seed + static_cast<uint64_t>(kind) + 1);
    for (auto& entry : enc.params().entries())
      worst = std::max(worst, grad_check_fd(loss, entry.tensor, a.h, a.coords,
                                            &coord_rng, a.floor));
    std::printf("encoding=%-8s max_rel_err=%.3e\n",
                to_string(kind).c_str(), worst);
    ok = ok && worst < a.tolerance;
  }
  if (!ok) {
    std::fprintf(stderr, "gradient check exceeded tolerance %.3e\n",
                 a.tolerance);
    return 3;
  }
  return 0;
}

struct SimilarityArgs {
  std::vector<std::string> checkpoints;
  int sample = 30;
  uint64_t seed = 0;
  std::string space = "pre_softmax";
  std::string out_path;
  CorpusOpts corpus;
};

int run_similarity(const SimilarityArgs& a) {
  const auto paths = expand_checkpoint_args(a.checkpoints);
  const Checkpoint first = load_checkpoint(paths.front());
  const Corpus corpus = make_corpus(a.corpus);
  require_vocab_match(first, corpus);
  const auto sentences = corpus_sentences(corpus, first.config.max_len);
  const WeightSpace space = weight_space_from_string(a.space);
  const auto reports =
      similarity_curve(paths, sentences, a.sample, a.seed, space);

  std::ofstream file;
  std::ostream* out = &std::cout;
  if (!a.out_path.empty()) {
    file.open(a.out_path, std::ios::binary | std::ios::trunc);
    if (!file) throw InputError("cannot write " + a.out_path);
    out = &file;
  }
  for (const auto& r : reports)
    *out << "{\"step\":" << r.step << ",\"mean_fs\":" << fmt_double(r.mean_fs)
         << ",\"mean_fh\":" << fmt_double(r.mean_fh)
         << ",\"sentences\":" << r.sentence_count << ",\"space\":\""
         << to_string(space) << "\"}\n";
  return 0;
}

struct TriangleArgs {
  std::string checkpoint;
  double t = 0.4;
  int ms = 64;
  bool divide_by_ms = false;
  CorpusOpts corpus;
};

int run_triangle(const TriangleArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Corpus corpus = make_corpus(a.corpus);
  require_vocab_match(ck, corpus);
  Encoder enc(ck.config);
  restore_params(enc, ck);
  const auto sentences = corpus_sentences(corpus, ck.config.max_len);
  const TriangleReport rep =
      triangle_percentage(enc, sentences, a.t, a.ms, a.divide_by_ms);
  std::printf("{\"sentences\":%d,\"matched\":%d,\"percentage\":%s,"
              "\"t\":%s,\"ms\":%d,\"group1\":%d,\"divide_by_ms\":%s}\n",
              rep.sentences, rep.matched, fmt_double(rep.percentage).c_str(),
              fmt_double(rep.t).c_str(), rep.ms, rep.group1_physical,
              rep.divide_by_ms ? "true" : "false");
  return 0;
}

struct ParamCountArgs {
  std::string encoding = "ddrp";
  int head_dim = 64;
  int r_s = 64;
  int r_a = 512;
  int hidden = 768;
};

int run_param_count(const ParamCountArgs& a) {
  const EncodingKind kind = encoding_kind_from_string(a.encoding);
  std::printf("%lld\n",
              extra_param_count(kind, a.head_dim, a.r_s, a.r_a, a.hidden));
  return 0;
}

struct CompareArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<uint64_t> seeds;
  int sample = 30;
  std::string space = "pre_softmax";
  CorpusOpts corpus;
};

int run_compare(const CompareArgs& a) {
  RunConfig base = RunConfig::parse_file(a.config_path);
  const Corpus corpus = make_corpus(a.corpus);
  const auto sentences = corpus_sentences(corpus, base.model.max_len);
  const WeightSpace space = weight_space_from_string(a.space);
  const std::vector<uint64_t> seeds =
      a.seeds.empty() ? std::vector<uint64_t>{base.train.seed} : a.seeds;

  fs::create_directories(a.out_dir);
  const std::string joint_path = a.out_dir + "/compare.jsonl";
  std::ofstream joint(joint_path, std::ios::binary | std::ios::trunc);
  if (!joint) throw InputError("cannot write " + joint_path);

  for (uint64_t seed : seeds) {
    for (Objective obj : {Objective::mlm, Objective::mth}) {
      RunConfig cfg = base;
      cfg.train.seed = seed;
      cfg.train.objective = obj;
      const std::string subdir =
          a.out_dir + "/" + to_string(obj) + "_seed" + std::to_string(seed);
      std::printf("training %s seed %llu\n", to_string(obj).c_str(),
                  static_cast<unsigned long long>(seed));
      const TrainResult res = train(cfg, corpus, subdir);
      const auto reports = similarity_curve(res.checkpoint_paths, sentences,
                                            a.sample, seed, space);
      for (const auto& r : reports)
        joint << "{\"seed\":" << seed << ",\"objective\":\""
              << to_string(obj) << "\",\"step\":" << r.step
              << ",\"mean_fs\":" << fmt_double(r.mean_fs)
              << ",\"mean_fh\":" << fmt_double(r.mean_fh)
              << ",\"sentences\":" << r.sentence_count << "}\n";
      const auto& last = reports.back();
      std::printf("  final mean_fs %.6f mean_fh %.6f\n", last.mean_fs,
                  last.mean_fh);
    }
  }
  std::printf("joint curves: %s\n", joint_path.c_str());
  return 0;
}

struct SynthArgs {
  std::string preset;
  int docs = 200;
  uint64_t seed = 0;
  std::string out_path;
};

int run_synth_corpus(const SynthArgs& a) {
  const Corpus corpus = synth_directional_corpus(a.preset, a.docs, a.seed);
  std::ofstream out(a.out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + a.out_path);
  for (size_t d = 0; d < corpus.documents.size(); ++d) {
    const auto& doc = corpus.documents[d];
    for (size_t i = 0; i < doc.size(); ++i) {
      if (i) out << ' ';
      out << corpus.vocab.words[static_cast<size_t>(doc[i])];
    }
    out << "\n";
    if (d + 1 < corpus.documents.size()) out << "\n";
  }
  std::printf("wrote %zu documents (vocab %d) to %s\n",
              corpus.documents.size(), corpus.vocab.size(),
              a.out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale transformer encoder laboratory"};
  app.require_subcommand(1);
  int rc = 0;

  PretrainArgs pre;
  auto* sub_pre = app.add_subcommand("pretrain", "run a pre-training job");
  sub_pre->add_option("--config", pre.config_path, "run config file")
      ->required();
  sub_pre->add_option("--out", pre.out_dir, "output directory")->required();
  sub_pre->add_option("--resume", pre.resume, "checkpoint to continue from");
  auto* seed_opt =
      sub_pre->add_option("--seed", pre.seed, "overrides the config seed");
  add_corpus_options(sub_pre, pre.corpus);
  sub_pre->callback([&] {
    pre.seed_given = seed_opt->count() > 0;
    rc = run_pretrain(pre);
  });

  GradCheckArgs gc;
  auto* sub_gc = app.add_subcommand(
      "grad-check", "finite-difference gradient check per encoding kind");
  sub_gc->add_option("--preset", gc.preset, "model preset to check");
  sub_gc->add_option("--seed", gc.seed, "initialization seed");
  sub_gc->add_option("--fd-step", gc.h, "finite-difference step");
  sub_gc->add_option("--floor", gc.floor,
                     "absolute gradient scale treated as zero");
  sub_gc->add_option("--coords", gc.coords,
                     "sampled coordinates per parameter");
  sub_gc->add_option("--tolerance", gc.tolerance,
                     "max relative error allowed");
  sub_gc->callback([&] { rc = run_grad_check(gc); });

  SimilarityArgs sim;
  auto* sub_sim = app.add_subcommand(
      "similarity", "token and head similarity across checkpoints");
  sub_sim
      ->add_option("--checkpoints", sim.checkpoints,
                   "checkpoint files or directories holding ckpt_*.bin")
      ->required();
  sub_sim->add_option("--sample", sim.sample, "sentences to sample");
  sub_sim->add_option("--seed", sim.seed, "sentence sampling seed");
  sub_sim->add_option("--space", sim.space,
                      "pre_softmax or post_softmax attention maps");
  sub_sim->add_option("--out", sim.out_path, "JSONL output path (default "
                      "stdout)");
  add_corpus_options(sub_sim, sim.corpus);
  sub_sim->callback([&] { rc = run_similarity(sim); });

  TriangleArgs tri;
  auto* sub_tri = app.add_subcommand(
      "triangle", "up-down triangle percentage of a grouped checkpoint");
  sub_tri->add_option("--checkpoint", tri.checkpoint, "checkpoint file")
      ->required();
  sub_tri->add_option("--t", tri.t, "triangle share threshold");
  sub_tri->add_option("--ms", tri.ms, "attention map crop size");
  sub_tri->add_flag("--divide-by-ms", tri.divide_by_ms,
                    "divide triangle sums by ms instead of sentence length");
  add_corpus_options(sub_tri, tri.corpus);
  sub_tri->callback([&] { rc = run_triangle(tri); });

  ParamCountArgs pc;
  auto* sub_pc = app.add_subcommand(
      "param-count", "extra relative-position parameters for a config");
  sub_pc->add_option("--encoding", pc.encoding, "encoding kind");
  sub_pc->add_option("--head-dim", pc.head_dim, "per-head dimension");
  sub_pc->add_option("--r_s", pc.r_s, "max relative distance");
  sub_pc->add_option("--r_a", pc.r_a, "absolute position table length");
  sub_pc->add_option("--hidden", pc.hidden, "model hidden size");
  sub_pc->callback([&] { rc = run_param_count(pc); });

  CompareArgs cmp;
  auto* sub_cmp = app.add_subcommand(
      "compare", "paired mlm/mth trainings with shared seeds");
  sub_cmp->add_option("--config", cmp.config_path, "base run config file")
      ->required();
  sub_cmp->add_option("--out", cmp.out_dir, "output directory")->required();
  sub_cmp->add_option("--seeds", cmp.seeds,
                      "seeds to pair (default: the config seed)");
  sub_cmp->add_option("--sample", cmp.sample, "sentences per similarity "
                      "snapshot");
  sub_cmp->add_option("--space", cmp.space,
                      "pre_softmax or post_softmax attention maps");
  add_corpus_options(sub_cmp, cmp.corpus);
  sub_cmp->callback([&] { rc = run_compare(cmp); });

  SynthArgs syn;
  auto* sub_syn = app.add_subcommand(
      "synth-corpus", "write a synthetic directional corpus as text");
  sub_syn->add_option("--preset", syn.preset, "copy-forward, copy-backward, "
                      "or bracket-match")
      ->required();
  sub_syn->add_option("--docs", syn.docs, "document count")
      ->check(CLI::PositiveNumber);
  sub_syn->add_option("--seed", syn.seed, "generation seed");
  sub_syn->add_option("--out", syn.out_path, "output text file")->required();
  sub_syn->callback([&] { rc = run_synth_corpus(syn); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return rc;
}
