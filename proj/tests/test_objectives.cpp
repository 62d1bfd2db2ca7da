#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "tlab/error.hpp"
#include "tlab/objectives.hpp"
#include "tlab/rng.hpp"
#include "tlab/tensor.hpp"
#include "tlab/token_ids.hpp"

using namespace tlab;

namespace {

// Stable scalar cross-entropy at one row, independent of log_softmax_rows.
double ce_ref(const Tensor& logits, int row_i, int label) {
  const int v = logits.cols();
  double mx = logits.at(row_i, 0);
  for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(row_i, j));
  double s = 0.0;
  for (int j = 0; j < v; ++j) s += std::exp(logits.at(row_i, j) - mx);
  return std::log(s) + mx - logits.at(row_i, label);
}

double cos_ref(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, sa = 0.0, sb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    sa += a[i] * a[i];
    sb += b[i] * b[i];
  }
  return dot / ((std::sqrt(sa) + kCosineNormEps) * (std::sqrt(sb) + kCosineNormEps));
}

std::vector<double> row_of(const Tensor& t, int i) {
  std::vector<double> out(t.cols());
  for (int j = 0; j < t.cols(); ++j) out[j] = t.at(i, j);
  return out;
}

std::vector<double> flat_of(const Tensor& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

}  // namespace

TEST_CASE("masking: ratio zero and degenerate inputs") {
  Rng rng(1);
  std::vector<int> tokens = {7, 8, 9, 10};
  std::vector<int> words = {0, 0, 1, 2};
  CHECK(plan_whole_word_masking(tokens, words, 0.0, 100, rng).empty());

  std::vector<int> never = {-1, -1, -1, -1};
  CHECK(plan_whole_word_masking(tokens, never, 1.0, 100, rng).empty());

  std::vector<int> short_words = {0, 0};
  CHECK_THROWS_AS(plan_whole_word_masking(tokens, short_words, 0.5, 100, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(plan_whole_word_masking(tokens, words, 1.5, 100, rng),
                  ConfigError);
}

TEST_CASE("masking: single word at ratio 1 covers all its tokens") {
  Rng rng(2);
  std::vector<int> tokens = {11, 12, 13};
  std::vector<int> words = {0, 0, 0};
  auto plan = plan_whole_word_masking(tokens, words, 1.0, 100, rng);
  REQUIRE(plan.actions.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(plan.actions[i].position == i);
    CHECK(plan.actions[i].original_id == tokens[i]);
  }
}

TEST_CASE("masking: whole words stay atomic and positions ascend") {
  Rng rng(3);
  // 60 words of 1..3 tokens, ids 100..., with a sprinkle of never-mask slots
  std::vector<int> tokens, words;
  Rng gen(77);
  for (int w = 0; w < 60; ++w) {
    const int len = 1 + static_cast<int>(gen.below(3));
    for (int k = 0; k < len; ++k) {
      tokens.push_back(100 + w);
      words.push_back(w);
    }
    if (w % 7 == 0) {
      tokens.push_back(kSepId);
      words.push_back(-1);
    }
  }
  auto plan = plan_whole_word_masking(tokens, words, 0.4, 500, rng);
  REQUIRE_FALSE(plan.empty());

  std::set<int> acted;
  for (size_t i = 0; i < plan.actions.size(); ++i) {
    const auto& a = plan.actions[i];
    if (i > 0) CHECK(a.position > plan.actions[i - 1].position);
    CHECK(a.original_id == tokens[a.position]);
    CHECK(words[a.position] >= 0);
    acted.insert(a.position);
  }
  // every word is fully in or fully out
  std::map<int, std::vector<int>> positions_of;
  for (size_t i = 0; i < words.size(); ++i)
    if (words[i] >= 0) positions_of[words[i]].push_back(static_cast<int>(i));
  for (const auto& [w, ps] : positions_of) {
    size_t hit = 0;
    for (int p : ps) hit += acted.count(p);
    CHECK((hit == 0 || hit == ps.size()));
  }
}

TEST_CASE("masking: covered fraction tracks the ratio on a long doc") {
  // 1000 words of 1..3 tokens each
  Rng gen(5);
  std::vector<int> tokens, words;
  for (int w = 0; w < 1000; ++w) {
    const int len = 1 + static_cast<int>(gen.below(3));
    for (int k = 0; k < len; ++k) {
      tokens.push_back(kReservedIds + static_cast<int>(gen.below(400)));
      words.push_back(w);
    }
  }
  Rng rng(6);
  auto plan = plan_whole_word_masking(tokens, words, 0.15, 500, rng);
  const double frac =
      static_cast<double>(plan.actions.size()) / static_cast<double>(tokens.size());
  CHECK(frac >= 0.12);
  CHECK(frac <= 0.18);
}

TEST_CASE("masking: action split is 80/10/10 and random ids stay in range") {
  const int vocab = 50000;
  std::vector<int> tokens(20000), words(20000);
  for (int i = 0; i < 20000; ++i) {
    tokens[i] = kReservedIds + (i % 40000);
    words[i] = i;
  }
  Rng rng(7);
  auto plan = plan_whole_word_masking(tokens, words, 0.5, vocab, rng);
  REQUIRE(plan.actions.size() > 9000);
  long long masked = 0, kept = 0, randomized = 0;
  for (const auto& a : plan.actions) {
    if (a.replacement_id == kMaskId) {
      ++masked;
    } else if (a.replacement_id == a.original_id) {
      ++kept;
    } else {
      ++randomized;
      CHECK(a.replacement_id >= kReservedIds);
      CHECK(a.replacement_id < vocab);
    }
  }
  const double n = static_cast<double>(plan.actions.size());
  CHECK(masked / n == doctest::Approx(0.8).epsilon(0.03));
  CHECK(kept / n == doctest::Approx(0.1).epsilon(0.2));
  CHECK(randomized / n == doctest::Approx(0.1).epsilon(0.2));
}

TEST_CASE("masking: deterministic per seed and apply only touches the plan") {
  std::vector<int> tokens, words;
  Rng gen(8);
  for (int w = 0; w < 50; ++w) {
    const int len = 1 + static_cast<int>(gen.below(2));
    for (int k = 0; k < len; ++k) {
      tokens.push_back(kReservedIds + static_cast<int>(gen.below(90)));
      words.push_back(w);
    }
  }
  Rng r1(99), r2(99), r3(100);
  auto p1 = plan_whole_word_masking(tokens, words, 0.3, 100, r1);
  auto p2 = plan_whole_word_masking(tokens, words, 0.3, 100, r2);
  auto p3 = plan_whole_word_masking(tokens, words, 0.3, 100, r3);
  REQUIRE(p1.actions.size() == p2.actions.size());
  bool same = true;
  for (size_t i = 0; i < p1.actions.size(); ++i)
    same = same && p1.actions[i].position == p2.actions[i].position &&
           p1.actions[i].replacement_id == p2.actions[i].replacement_id;
  CHECK(same);
  bool differs = p1.actions.size() != p3.actions.size();
  for (size_t i = 0; !differs && i < p1.actions.size(); ++i)
    differs = p1.actions[i].position != p3.actions[i].position ||
              p1.actions[i].replacement_id != p3.actions[i].replacement_id;
  CHECK(differs);

  auto corrupted = apply_masking(tokens, p1);
  std::map<int, int> replacement_at;
  for (const auto& a : p1.actions) replacement_at[a.position] = a.replacement_id;
  for (size_t i = 0; i < tokens.size(); ++i) {
    auto it = replacement_at.find(static_cast<int>(i));
    if (it != replacement_at.end())
      CHECK(corrupted[i] == it->second);
    else
      CHECK(corrupted[i] == tokens[i]);
  }
}

TEST_CASE("mlm: uniform logits give ln V") {
  Tensor logits = Tensor::full({5, 7}, 0.3);
  MaskingPlan plan;
  plan.actions = {{0, 2, kMaskId}, {1, 6, kMaskId}, {3, 0, kMaskId}, {4, 4, kMaskId}};
  CHECK(mlm_loss(logits, plan).value() ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("mlm: confident correct logits saturate to zero loss") {
  Tensor logits = Tensor::zeros({3, 4});
  MaskingPlan plan;
  plan.actions = {{0, 1, kMaskId}, {2, 3, kMaskId}};
  {
    auto d = logits.mutable_data();
    d[0 * 4 + 1] = 20.0;
    d[2 * 4 + 3] = 20.0;
  }
  CHECK(mlm_loss(logits, plan).value() < 1e-8);
  CHECK(mlm_loss(logits, plan).value() >= 0.0);
}

TEST_CASE("mlm: hand-set logits match a scalar cross-entropy oracle") {
  Rng rng(11);
  Tensor logits = Tensor::randn({4, 5}, rng, 2.0);
  MaskingPlan plan;
  plan.actions = {{0, 4, kMaskId}, {2, 1, kMaskId}, {3, 0, kMaskId}};
  const double want =
      (ce_ref(logits, 0, 4) + ce_ref(logits, 2, 1) + ce_ref(logits, 3, 0)) / 3.0;
  CHECK(mlm_loss(logits, plan).value() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("mlm: empty plan is zero and counted") {
  Tensor logits = Tensor::zeros({2, 3});
  MaskingPlan plan;
  WarnCounters warn;
  Tensor l = mlm_loss(logits, plan, &warn);
  CHECK(l.value() == 0.0);
  CHECK(warn.empty_mlm_plan == 1);
  mlm_loss(logits, plan, &warn);
  CHECK(warn.empty_mlm_plan == 2);
}

TEST_CASE("mlm: gradient against finite differences") {
  Rng rng(12);
  Tensor logits = Tensor::randn({3, 6}, rng, 1.0, true);
  MaskingPlan plan;
  plan.actions = {{0, 5, kMaskId}, {1, 2, kMaskId}};
  auto f = [&]() { return mlm_loss(logits, plan); };
  CHECK(grad_check_fd(f, logits) < 1e-6);
}

TEST_CASE("sample_tokens: contract") {
  Rng rng(13);
  SUBCASE("n equals n_prime gives the identity") {
    auto s = sample_tokens(6, 6, rng);
    REQUIRE(s.size() == 6);
    for (int i = 0; i < 6; ++i) CHECK(s[i] == i);
  }
  SUBCASE("oversized request uses every position") {
    auto s = sample_tokens(4, 50, rng);
    REQUIRE(s.size() == 4);
    for (int i = 0; i < 4; ++i) CHECK(s[i] == i);
  }
  SUBCASE("strictly increasing, distinct, in range") {
    auto s = sample_tokens(100, 50, rng);
    REQUIRE(s.size() == 50);
    for (size_t i = 0; i < s.size(); ++i) {
      CHECK(s[i] >= 0);
      CHECK(s[i] < 100);
      if (i > 0) CHECK(s[i] > s[i - 1]);
    }
  }
  SUBCASE("deterministic per seed") {
    Rng a(14), b(14);
    CHECK(sample_tokens(100, 50, a) == sample_tokens(100, 50, b));
  }
  SUBCASE("invalid sizes throw") {
    CHECK_THROWS_AS(sample_tokens(0, 3, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_tokens(5, 0, rng), ConfigError);
  }
}

TEST_CASE("sample_tokens: per-index frequency is n_prime/n") {
  Rng rng(15);
  const int draws = 100000;
  std::vector<long long> hits(10, 0);
  for (int d = 0; d < draws; ++d)
    for (int idx : sample_tokens(10, 3, rng)) ++hits[idx];
  for (int i = 0; i < 10; ++i) {
    const double freq = static_cast<double>(hits[i]) / draws;
    CHECK(std::abs(freq - 0.3) < 0.01);
  }
}

TEST_CASE("strided_tokens: even spacing without randomness") {
  auto s = strided_tokens(10, 3);
  REQUIRE(s.size() == 3);
  CHECK(s[0] == 0);
  CHECK(s[1] == 3);
  CHECK(s[2] == 6);
  auto all = strided_tokens(5, 5);
  for (int i = 0; i < 5; ++i) CHECK(all[i] == i);
  auto over = strided_tokens(3, 9);
  REQUIRE(over.size() == 3);
  for (size_t i = 1; i < over.size(); ++i) CHECK(over[i] > over[i - 1]);
  CHECK(strided_tokens(64, 50).size() == 50);
}

TEST_CASE("sample_heads: contract and per-pair frequency") {
  Rng rng(16);
  SUBCASE("m_prime equals m selects every head in every layer") {
    auto hs = sample_heads(4, 4, 3, rng);
    REQUIRE(hs.size() == 3);
    for (const auto& layer : hs) {
      REQUIRE(layer.size() == 4);
      for (int i = 0; i < 4; ++i) CHECK(layer[i] == i);
    }
  }
  SUBCASE("distinct ascending entries, layers drawn independently") {
    auto hs = sample_heads(12, 2, 64, rng);
    bool all_same = true;
    for (const auto& layer : hs) {
      REQUIRE(layer.size() == 2);
      CHECK(layer[0] < layer[1]);
      CHECK(layer[0] >= 0);
      CHECK(layer[1] < 12);
      all_same = all_same && layer == hs[0];
    }
    CHECK_FALSE(all_same);
  }
  SUBCASE("deterministic per seed") {
    Rng a(17), b(17);
    CHECK(sample_heads(12, 2, 4, a) == sample_heads(12, 2, 4, b));
  }
  SUBCASE("unordered pairs are uniform at m=12, m_prime=2") {
    Rng mc(18);
    const int draws = 100000;
    std::map<std::pair<int, int>, long long> hits;
    for (int d = 0; d < draws; ++d) {
      auto hs = sample_heads(12, 2, 1, mc);
      ++hits[{hs[0][0], hs[0][1]}];
    }
    CHECK(hits.size() == 66);
    for (const auto& [pair, count] : hits) {
      const double freq = static_cast<double>(count) / draws;
      CHECK(std::abs(freq - 1.0 / 66.0) < 0.002);
    }
  }
}

TEST_CASE("tcd: fixed points") {
  SUBCASE("identical rows give 1") {
    Tensor h = Tensor::from_data({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
    CHECK(tcd_loss(h, {0, 1, 2}).value() == doctest::Approx(1.0).epsilon(1e-7));
  }
  SUBCASE("orthogonal pair gives exactly 0") {
    Tensor h = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(tcd_loss(h, {0, 1}).value() == 0.0);
  }
  SUBCASE("three hand vectors match the scalar oracle") {
    Rng rng(19);
    Tensor h = Tensor::randn({5, 6}, rng, 1.0);
    std::vector<int> idx = {0, 2, 4};
    double want = 0.0;
    for (size_t i = 0; i < idx.size(); ++i)
      for (size_t j = i + 1; j < idx.size(); ++j)
        want += cos_ref(row_of(h, idx[i]), row_of(h, idx[j]));
    want *= 2.0 / (3.0 * 2.0);
    CHECK(tcd_loss(h, idx).value() == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("fewer than two indices is zero and counted") {
    Tensor h = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    WarnCounters warn;
    CHECK(tcd_loss(h, {0}, &warn).value() == 0.0);
    CHECK(warn.tcd_too_few == 1);
  }
}

TEST_CASE("tcd: invariant under uniform positive scaling") {
  Rng rng(20);
  Tensor h = Tensor::randn({6, 5}, rng, 1.0);
  std::vector<double> scaled(h.data().begin(), h.data().end());
  for (double& x : scaled) x *= 3.7;
  Tensor h2 = Tensor::from_data({6, 5}, scaled);
  std::vector<int> idx = {0, 2, 3, 5};
  CHECK(std::abs(tcd_loss(h, idx).value() - tcd_loss(h2, idx).value()) < 1e-6);
}

TEST_CASE("tcd: an orthogonal intruder strictly lowers the loss") {
  Tensor same = Tensor::from_data({3, 4}, {1, 2, 0, 0, 1, 2, 0, 0, 1, 2, 0, 0});
  Tensor mixed = Tensor::from_data({3, 4}, {1, 2, 0, 0, 1, 2, 0, 0, 0, 0, 3, 1});
  CHECK(tcd_loss(mixed, {0, 1, 2}).value() < tcd_loss(same, {0, 1, 2}).value());
}

TEST_CASE("tcd: gradient descent on free vectors goes negative in 200 steps") {
  Rng rng(21);
  Tensor v = Tensor::randn({3, 4}, rng, 1.0, true);
  double loss_val = tcd_loss(v, {0, 1, 2}).value();
  const double initial = loss_val;
  for (int step = 0; step < 200; ++step) {
    Tensor loss = tcd_loss(v, {0, 1, 2});
    backward(loss);
    loss_val = loss.value();
    auto g = v.grad();
    auto d = v.mutable_data();
    for (size_t i = 0; i < d.size(); ++i) d[i] -= 0.2 * g[i];
    v.zero_grad();
  }
  CHECK(loss_val < 0.0);
  CHECK(loss_val < initial);
}

TEST_CASE("tcd: gradient against finite differences") {
  Rng rng(22);
  Tensor h = Tensor::randn({5, 4}, rng, 1.0, true);
  auto f = [&]() { return tcd_loss(h, {0, 1, 3}); };
  CHECK(grad_check_fd(f, h) < 1e-6);
}

TEST_CASE("hcd: fixed points and scalar oracle") {
  SUBCASE("identical maps give 1") {
    Tensor a = Tensor::from_data({2, 2}, {0.5, 0.5, 0.25, 0.75});
    std::vector<std::vector<Tensor>> maps = {{a, a, a}, {a, a, a}};
    auto heads = std::vector<std::vector<int>>{{0, 2}, {1, 2}};
    CHECK(hcd_loss(maps, heads).value() == doctest::Approx(1.0).epsilon(1e-7));
  }
  SUBCASE("one layer, orthogonal flattened maps give exactly 0") {
    Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    std::vector<std::vector<Tensor>> maps = {{a, b}};
    auto heads = std::vector<std::vector<int>>{{0, 1}};
    CHECK(hcd_loss(maps, heads).value() == 0.0);
  }
  SUBCASE("two layers, two heads each, against the scalar oracle") {
    Rng rng(23);
    std::vector<std::vector<Tensor>> maps;
    for (int l = 0; l < 2; ++l) {
      std::vector<Tensor> layer;
      for (int h = 0; h < 4; ++h) layer.push_back(Tensor::randn({3, 3}, rng, 1.0));
      maps.push_back(layer);
    }
    auto heads = std::vector<std::vector<int>>{{1, 3}, {0, 2}};
    double want = cos_ref(flat_of(maps[0][1]), flat_of(maps[0][3])) +
                  cos_ref(flat_of(maps[1][0]), flat_of(maps[1][2]));
    want *= 2.0 / (2.0 * 2.0 * 1.0);
    CHECK(hcd_loss(maps, heads).value() == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("single sampled head is zero and counted") {
    Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    std::vector<std::vector<Tensor>> maps = {{a, a}};
    WarnCounters warn;
    auto heads = std::vector<std::vector<int>>{{0}};
    CHECK(hcd_loss(maps, heads, &warn).value() == 0.0);
    CHECK(warn.hcd_too_few == 1);
  }
  SUBCASE("ragged or misaligned samples are rejected") {
    Tensor a = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    std::vector<std::vector<Tensor>> maps = {{a, a}, {a, a}};
    auto ragged = std::vector<std::vector<int>>{{0, 1}, {0}};
    CHECK_THROWS_AS(hcd_loss(maps, ragged), std::invalid_argument);
    auto short_layers = std::vector<std::vector<int>>{{0, 1}};
    CHECK_THROWS_AS(hcd_loss(maps, short_layers), std::invalid_argument);
  }
}

TEST_CASE("hcd: invariant under uniform positive scaling of all maps") {
  Rng rng(24);
  std::vector<std::vector<Tensor>> maps, scaled;
  for (int l = 0; l < 2; ++l) {
    std::vector<Tensor> layer, layer2;
    for (int h = 0; h < 3; ++h) {
      Tensor m = Tensor::randn({4, 4}, rng, 1.0);
      std::vector<double> d(m.data().begin(), m.data().end());
      for (double& x : d) x *= 0.125;
      layer.push_back(m);
      layer2.push_back(Tensor::from_data({4, 4}, d));
    }
    maps.push_back(layer);
    scaled.push_back(layer2);
  }
  auto heads = std::vector<std::vector<int>>{{0, 2}, {0, 1}};
  CHECK(std::abs(hcd_loss(maps, heads).value() - hcd_loss(scaled, heads).value()) <
        1e-6);
}

TEST_CASE("hcd: gradient against finite differences") {
  Rng rng(25);
  Tensor a = Tensor::randn({3, 3}, rng, 1.0, true);
  Tensor b = Tensor::randn({3, 3}, rng, 1.0, true);
  Tensor c = Tensor::randn({3, 3}, rng, 1.0, true);
  std::vector<std::vector<Tensor>> maps = {{a, b, c}};
  auto heads = std::vector<std::vector<int>>{{0, 1, 2}};
  auto f = [&]() { return hcd_loss(maps, heads); };
  CHECK(grad_check_fd(f, a) < 1e-6);
  CHECK(grad_check_fd(f, b) < 1e-6);
}

TEST_CASE("decay factor: linear ramp with clamping") {
  CHECK(decay_factor(0, 100) == 1.0);
  CHECK(decay_factor(50, 100) == 0.5);
  CHECK(decay_factor(100, 100) == 0.0);
  CHECK(decay_factor(150, 100) == 0.0);
  CHECK(decay_factor(-10, 100) == 1.0);
  CHECK_THROWS_AS(decay_factor(5, 0), ConfigError);
  CHECK_THROWS_AS(decay_factor(5, -3), ConfigError);
}

TEST_CASE("mth: pinned substitution and exact composition") {
  Tensor mlm = Tensor::scalar(2.0);
  Tensor tcd = Tensor::scalar(0.5);
  Tensor hcd = Tensor::scalar(0.8);
  auto r = mth_loss(mlm, tcd, hcd, 1.0, 0.01, 0, 100);
  CHECK(r.breakdown.T == 1.0);
  CHECK(r.breakdown.total == doctest::Approx(2.508).epsilon(1e-12));
  CHECK(r.breakdown.total == 2.0 + 1.0 * 1.0 * 0.5 + 0.01 * 1.0 * 0.8);

  auto done = mth_loss(mlm, tcd, hcd, 1.0, 0.01, 100, 100);
  CHECK(done.breakdown.T == 0.0);
  CHECK(done.breakdown.total == 2.0);
  CHECK(done.total.value() == mlm.value());
}

TEST_CASE("mth: composition identity holds bit for bit on random values") {
  Rng rng(26);
  for (int trial = 0; trial < 200; ++trial) {
    const double m = rng.normal(1.5, 2.0);
    const double t = rng.normal(0.0, 0.7);
    const double h = rng.normal(0.0, 0.7);
    const double a1 = rng.uniform() * 2.0;
    const double a2 = rng.uniform() * 0.1;
    const long long cur = static_cast<long long>(rng.below(2001));
    auto r = mth_loss(Tensor::scalar(m), Tensor::scalar(t), Tensor::scalar(h),
                      a1, a2, cur, 2000);
    const double T = r.breakdown.T;
    CHECK(r.total.value() == m + a1 * T * t + a2 * T * h);
    CHECK(r.breakdown.total == r.total.value());
    CHECK(r.breakdown.mlm == m);
    CHECK(r.breakdown.tcd == t);
    CHECK(r.breakdown.hcd == h);
  }
}

TEST_CASE("mth: zero auxiliary weights reduce exactly to mlm, gradients too") {
  Rng rng(27);
  Tensor logits = Tensor::randn({4, 7}, rng, 1.0, true);
  Tensor hidden = Tensor::randn({4, 5}, rng, 1.0, true);
  Tensor map_a = Tensor::randn({4, 4}, rng, 1.0, true);
  Tensor map_b = Tensor::randn({4, 4}, rng, 1.0, true);
  MaskingPlan plan;
  plan.actions = {{0, 3, kMaskId}, {2, 6, kMaskId}};

  Tensor pure = mlm_loss(logits, plan);
  backward(pure);
  std::vector<double> g_pure(logits.grad().begin(), logits.grad().end());
  logits.zero_grad();

  std::vector<std::vector<Tensor>> maps = {{map_a, map_b}};
  auto heads = std::vector<std::vector<int>>{{0, 1}};
  auto r = mth_loss(mlm_loss(logits, plan), tcd_loss(hidden, {0, 1, 2}),
                    hcd_loss(maps, heads), 0.0, 0.0, 10, 100);
  CHECK(r.total.value() == pure.value());
  backward(r.total);
  for (size_t i = 0; i < g_pure.size(); ++i)
    CHECK(logits.grad()[i] == g_pure[i]);
  for (double g : hidden.grad()) CHECK(g == 0.0);
  for (double g : map_a.grad()) CHECK(g == 0.0);
}

TEST_CASE("mth: total gradient decomposes into component gradients") {
  // toy model: every component is a function of one shared weight matrix
  Rng rng(28);
  Tensor w = Tensor::randn({4, 4}, rng, 1.0, true);
  Tensor x1 = Tensor::randn({3, 4}, rng, 1.0);
  Tensor x2 = Tensor::randn({3, 4}, rng, 1.0);
  MaskingPlan plan;
  plan.actions = {{0, 1, kMaskId}, {1, 3, kMaskId}, {2, 0, kMaskId}};
  const double a1 = 1.0, a2 = 0.01;
  const long long cur = 30, max_steps = 100;

  auto build_mlm = [&]() { return mlm_loss(matmul(x1, w), plan); };
  auto build_tcd = [&]() { return tcd_loss(matmul(x1, w), {0, 1, 2}); };
  auto build_hcd = [&]() {
    std::vector<std::vector<Tensor>> maps = {{matmul(x1, w), matmul(x2, w)}};
    return hcd_loss(maps, {{0, 1}});
  };
  auto build_total = [&]() {
    return mth_loss(build_mlm(), build_tcd(), build_hcd(), a1, a2, cur,
                    max_steps)
        .total;
  };

  auto grad_of = [&](const std::function<Tensor()>& f) {
    w.zero_grad();
    backward(f());
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  auto g_mlm = grad_of(build_mlm);
  auto g_tcd = grad_of(build_tcd);
  auto g_hcd = grad_of(build_hcd);
  auto g_total = grad_of(build_total);
  const double T = decay_factor(cur, max_steps);
  for (size_t i = 0; i < g_total.size(); ++i)
    CHECK(g_total[i] ==
          doctest::Approx(g_mlm[i] + a1 * T * g_tcd[i] + a2 * T * g_hcd[i])
              .epsilon(1e-12));

  w.zero_grad();
  CHECK(grad_check_fd([&]() { return build_total(); }, w) < 1e-6);
}
