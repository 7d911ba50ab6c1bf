#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "dialect/decode.hpp"
#include "dialect/synth.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dialect;
using namespace dialect::synth;

namespace {

SynthConfig small_cfg(std::uint64_t seed = 1) {
  SynthConfig c;
  c.n_train_per_dialect = 3000;
  c.n_dev = 200;
  c.n_test = 200;
  c.seed = seed;
  return c;
}

// Spearman over tokens of `a` present in `b`, ranked by descending count with
// average ranks for ties, computed from scratch.
double rank_corr(const corpus::TokenizedCorpus& ca, const corpus::TokenizedCorpus& cb,
                 std::size_t top = 0) {
  std::map<std::string, double> fa, fb;
  for (const auto& s : ca)
    for (const auto& t : s) fa[t] += 1;
  for (const auto& s : cb)
    for (const auto& t : s) fb[t] += 1;
  std::vector<std::pair<std::string, double>> common;
  for (const auto& [t, n] : fa)
    if (fb.count(t)) common.emplace_back(t, n);
  if (top > 0) {
    std::stable_sort(common.begin(), common.end(),
                     [](const auto& x, const auto& y) { return x.second > y.second; });
    if (common.size() > top) common.resize(top);
  }
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double greater = 0, equal = 0;
      for (double w : v) {
        greater += w > v[i];
        equal += w == v[i];
      }
      r[i] = greater + (equal + 1) / 2;
    }
    return r;
  };
  std::vector<double> x, y;
  for (const auto& [t, n] : common) {
    x.push_back(n);
    y.push_back(fb[t]);
  }
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("synth.rules") {
  TEST_CASE("direct application and simultaneous pass") {
    RuleTable t;
    t.add("a", "x");
    t.add("c", "y");
    CHECK(t.apply({"a", "b", "c"}) == corpus::Tokens{"x", "b", "y"});

    RuleTable swap;
    swap.add("a", "b");
    swap.add("b", "a");
    CHECK(swap.apply({"a", "b", "a"}) == corpus::Tokens{"b", "a", "b"});
  }

  TEST_CASE("empty table is the identity and inverse undoes apply") {
    RuleTable empty;
    const corpus::Tokens s{"p", "q", "r"};
    CHECK(empty.apply(s) == s);

    RuleTable t(Dialect::A, Dialect::B);
    t.add("a", "x");
    t.add("x", "z");
    t.add("z", "a");
    t.add("q", "w");  // w never occurs on the source side
    const auto inv = t.inverse();
    CHECK(inv.from() == Dialect::B);
    CHECK(inv.to() == Dialect::A);
    Rng rng(3);
    const std::vector<std::string> alphabet{"a", "x", "z", "q", "m"};
    for (int rep = 0; rep < 200; ++rep) {
      corpus::Tokens in;
      for (int k = 0; k < 8; ++k) in.push_back(alphabet[rng.below(alphabet.size())]);
      CHECK(inv.apply(t.apply(in)) == in);
      CHECK(t.apply(in).size() == in.size());
    }
  }

  TEST_CASE("injectivity is enforced") {
    RuleTable t;
    t.add("a", "x");
    CHECK_THROWS_AS(t.add("a", "y"), ConfigError);
    CHECK_THROWS_AS(t.add("b", "x"), ConfigError);
  }

  TEST_CASE("id-level translation matches token-level translation") {
    RuleTable t;
    t.add("a", "x");
    t.add("c", "y");
    t.add("missing", "a");
    corpus::Vocab v;
    for (const char* tok : {"a", "b", "c", "x", "y"}) v.add(tok, 1);
    const auto table = t.compile(v);
    CHECK(table.size() == 2);
    const Sentence s{v.encode(corpus::Tokens{"a", "b", "c"}), Dialect::A};
    const auto out = rule_based_translate(s, t, v);
    CHECK(out.dialect == Dialect::B);
    CHECK(v.decode(out.ids) == corpus::Tokens{"x", "b", "y"});
    CHECK(rule_based_translate(s, table, Dialect::B) == out);
  }

  TEST_CASE("file round trip and malformed files") {
    testutil::TempDir dir("rules");
    RuleTable t(Dialect::B, Dialect::A);
    t.add("甲", "乙");
    t.add("x", "y");
    t.save(dir.path() / "r.tsv");
    CHECK(RuleTable::load(dir.path() / "r.tsv") == t);
    std::ofstream(dir.path() / "bad.tsv") << "no tab here\n";
    CHECK_THROWS_AS(RuleTable::load(dir.path() / "bad.tsv"), ConfigError);
  }
}

TEST_SUITE("synth.generate") {
  TEST_CASE("default configuration meets the rank-correlation targets") {
    const SynthConfig cfg;  // vocab 200, 20k sentences per dialect
    const auto d = generate_synthetic_pair(cfg);
    CHECK(d.train_a.size() == 20000);
    CHECK(d.train_b.size() == 20000);
    const double full = rank_corr(d.train_a, d.train_b);
    const double top = rank_corr(d.train_a, d.train_b, 50);
    CHECK(full > 0.7);
    CHECK(top < 0.5);
    CHECK(d.stats.full_spearman == doctest::Approx(full).epsilon(1e-12));
    CHECK(d.stats.top_spearman == doctest::Approx(top).epsilon(1e-12));
    CHECK(d.rules.size() == 2 * 15 + 2);
    CHECK(d.stats.unique_a == 2);
    CHECK(d.stats.unique_b == 2);
  }

  TEST_CASE("rules reproduce every parallel pair and the baseline scores 100") {
    const auto d = generate_synthetic_pair(small_cfg());
    REQUIRE(d.dev_a.size() == 200);
    std::vector<std::vector<TokenId>> hyp, ref;
    std::map<std::string, TokenId> ids;
    auto index = [&](const corpus::Tokens& t) {
      std::vector<TokenId> out;
      for (const auto& s : t) out.push_back(ids.emplace(s, static_cast<TokenId>(ids.size())).first->second);
      return out;
    };
    for (std::size_t i = 0; i < d.test_a.size(); ++i) {
      CHECK(d.rules.apply(d.test_a[i]) == d.test_b[i]);
      CHECK(d.rules.inverse().apply(d.test_b[i]) == d.test_a[i]);
      hyp.push_back(index(d.rules.apply(d.test_a[i])));
      ref.push_back(index(d.test_b[i]));
    }
    for (std::size_t i = 0; i < d.dev_a.size(); ++i) CHECK(d.rules.apply(d.dev_a[i]) == d.dev_b[i]);
    CHECK(decode::bleu(hyp, ref).score == doctest::Approx(100.0));
  }

  TEST_CASE("zero substitution and no unique tokens give identical dialects") {
    auto cfg = small_cfg();
    cfg.substitution_fraction = 0.0;
    cfg.unique_token_count = 0;
    cfg.check_targets = false;
    const auto d = generate_synthetic_pair(cfg);
    CHECK(d.rules.size() == 0);
    CHECK(d.dev_a == d.dev_b);
    CHECK(d.stats.unique_a == 0);
    CHECK(d.stats.unique_b == 0);
  }

  TEST_CASE("pools are sentence-disjoint and lengths are bounded") {
    const auto cfg = small_cfg(7);
    const auto d = generate_synthetic_pair(cfg);
    const auto inv = d.rules.inverse();
    std::set<corpus::Tokens> a(d.train_a.begin(), d.train_a.end()), base_b, eval;
    for (const auto& s : d.train_b) base_b.insert(inv.apply(s));
    for (const auto& s : d.dev_a) eval.insert(s);
    for (const auto& s : d.test_a) eval.insert(s);
    CHECK(eval.size() == d.dev_a.size() + d.test_a.size());
    for (const auto& s : base_b) CHECK_FALSE(a.count(s));
    for (const auto& s : eval) {
      CHECK_FALSE(a.count(s));
      CHECK_FALSE(base_b.count(s));
    }
    for (const auto* c : {&d.train_a, &d.train_b, &d.dev_a, &d.test_b})
      for (const auto& s : *c) {
        CHECK(s.size() >= cfg.len_min);
        CHECK(s.size() <= cfg.len_max);
      }
  }

  TEST_CASE("generation is deterministic per seed") {
    const auto x = generate_synthetic_pair(small_cfg(3));
    const auto y = generate_synthetic_pair(small_cfg(3));
    const auto z = generate_synthetic_pair(small_cfg(4));
    CHECK(x.train_a == y.train_a);
    CHECK(x.train_b == y.train_b);
    CHECK(x.test_b == y.test_b);
    CHECK(x.rules == y.rules);
    CHECK(x.train_a != z.train_a);

    testutil::TempDir d1("synth1"), d2("synth2");
    write_synth_data(x, small_cfg(3), d1.path());
    write_synth_data(y, small_cfg(3), d2.path());
    for (const char* f : {"train.A", "train.B", "dev.A", "dev.B", "test.A", "test.B", "rules.tsv", "synth.json"})
      CHECK(slurp(d1.path() / f) == slurp(d2.path() / f));
    CHECK(RuleTable::load(d1.path() / "rules.tsv") == x.rules);
  }

  TEST_CASE("infeasible configurations are rejected") {
    auto c = small_cfg();
    c.unique_token_count = 81;  // only 80 tokens above partner_rank_max
    CHECK_THROWS_AS(generate_synthetic_pair(c), ConfigError);
    c = small_cfg();
    c.len_max = 33;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_cfg();
    c.substitution_fraction = 1.0;
    c.partner_rank_max = 60;  // 50 swaps, 10 partners
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_cfg();
    c.base_vocab_size = 8;
    c.substitution_top = 4;
    c.partner_rank_max = 6;
    c.n_train_per_dialect = 100000;
    c.len_max = 4;
    c.successor_count = 1;
    c.check_targets = false;
    CHECK_THROWS_AS(generate_synthetic_pair(c), ConfigError);
  }

  TEST_CASE("target check fires when a swap-free corpus is demanded to diverge") {
    auto c = small_cfg();
    c.substitution_fraction = 0.0;
    CHECK_THROWS_AS(generate_synthetic_pair(c), ConfigError);
  }

  TEST_CASE("token surface forms are distinct single code points") {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < 300; ++i) {
      const auto t = token_text(i);
      CHECK(corpus::tokenize(t, corpus::TokenizeMode::Char).size() == 1);
      seen.insert(t);
    }
    CHECK(seen.size() == 300);
  }
}
