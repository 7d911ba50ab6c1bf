#include <algorithm>
#include <numeric>
#include <fstream>
#include <random>
#include <sstream>

#include "dialect/corpus.hpp"
#include "doctest.h"
#include "json.hpp"
#include "probes.hpp"
#include "test_util.hpp"

using namespace dialect;
using namespace dialect::corpus;

namespace {

TokenizedCorpus ws(std::initializer_list<const char*> lines) {
  TokenizedCorpus out;
  for (const char* l : lines) out.push_back(tokenize(l, TokenizeMode::Whitespace));
  return out;
}

std::vector<std::string> non_specials(const Vocab& v) {
  return {v.tokens().begin() + kNumSpecials, v.tokens().end()};
}

}  // namespace

TEST_SUITE("corpus.tokenize") {
  TEST_CASE("char mode splits code points and drops whitespace") {
    CHECK(tokenize("你好", TokenizeMode::Char) == Tokens{"你", "好"});
    CHECK(tokenize("a b", TokenizeMode::Char) == Tokens{"a", "b"});
    CHECK(tokenize("é\t中 x", TokenizeMode::Char) == Tokens{"é", "中", "x"});
  }

  TEST_CASE("whitespace mode splits on runs") {
    CHECK(tokenize("  t1  t2 ", TokenizeMode::Whitespace) == Tokens{"t1", "t2"});
    CHECK(tokenize("", TokenizeMode::Whitespace).empty());
  }

  TEST_CASE("detokenize inverts tokenize up to whitespace normalization") {
    for (std::string s : {"你好世界", "abc"})
      CHECK(detokenize(tokenize(s, TokenizeMode::Char), TokenizeMode::Char) == s);
    CHECK(detokenize(tokenize(" 你 好 ", TokenizeMode::Char), TokenizeMode::Char) == "你好");
    CHECK(detokenize(tokenize("  x   yy z ", TokenizeMode::Whitespace), TokenizeMode::Whitespace) ==
          "x yy z");
  }

  TEST_CASE("parse_mode") {
    CHECK(parse_mode("char") == TokenizeMode::Char);
    CHECK(parse_mode("whitespace") == TokenizeMode::Whitespace);
    CHECK_THROWS_AS(parse_mode("bpe"), ConfigError);
  }
}

TEST_SUITE("corpus.vocab") {
  TEST_CASE("empty corpora give exactly the specials") {
    std::vector<TokenizedCorpus> none{{}, {}};
    const auto v = build_joint_vocab(none);
    CHECK(v.size() == kNumSpecials);
    CHECK(v.tokens() == Vocab::special_tokens());
  }

  TEST_CASE("frequency order with code point tie break") {
    std::vector<TokenizedCorpus> c{ws({"a b"}), ws({"b c"})};
    const auto v = build_joint_vocab(c, 1);
    CHECK(non_specials(v) == std::vector<std::string>{"b", "a", "c"});
    CHECK(v.freq(*v.find("b")) == 2);
    const auto v2 = build_joint_vocab(c, 2);
    CHECK(non_specials(v2) == std::vector<std::string>{"b"});
  }

  TEST_CASE("ids are dense and id/token are inverse") {
    std::vector<TokenizedCorpus> c{ws({"x y z x", "q"}), ws({"z z w"})};
    const auto v = build_joint_vocab(c);
    for (std::size_t id = 0; id < v.size(); ++id)
      CHECK(*v.find(v.token(static_cast<TokenId>(id))) == static_cast<TokenId>(id));
    CHECK_FALSE(v.find("nope").has_value());
    CHECK(v.encode(Tokens{"x", "nope"}) == std::vector<TokenId>{*v.find("x"), kUnk});
    CHECK(v.decode(std::vector<TokenId>{kBos, *v.find("q"), kEos}) == Tokens{"q"});
    CHECK_THROWS_AS(v.token(999), VocabError);
  }

  TEST_CASE("order of corpora and sentences does not matter") {
    std::vector<TokenizedCorpus> c1{ws({"a b c", "c d"}), ws({"d e", "a"})};
    std::vector<TokenizedCorpus> c2{ws({"a", "d e"}), ws({"c d", "a b c"})};
    CHECK(build_joint_vocab(c1) == build_joint_vocab(c2));
  }

  TEST_CASE("file round trip is bit exact") {
    testutil::TempDir dir("vocab");
    std::vector<TokenizedCorpus> c{ws({"你 好 你", "tab\\x"}), ws({"好 z"})};
    const auto v = build_joint_vocab(c);
    v.save(dir / "v.tsv");
    const auto back = Vocab::load(dir / "v.tsv");
    CHECK(back == v);
    back.save(dir / "w.tsv");
    std::ifstream a(dir / "v.tsv"), b(dir / "w.tsv");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
    CHECK(sa.str().rfind("<pad>", 0) == 0);
  }

  TEST_CASE("malformed vocab files are rejected") {
    testutil::TempDir dir("badvocab");
    std::ofstream(dir / "bad.tsv") << "x\t1\n";
    CHECK_THROWS(Vocab::load(dir / "bad.tsv"));
  }
}

TEST_SUITE("corpus.filter") {
  TEST_CASE("length bounds are inclusive") {
    TokenizedCorpus c;
    for (std::size_t n : {3, 4, 32, 33}) c.push_back(Tokens(n, "a"));
    std::vector<TokenizedCorpus> both{c, {}};
    const auto v = build_joint_vocab(both);
    const auto kept = filter_corpus(c, v, Dialect::B, 4, 32);
    REQUIRE(kept.size() == 2);
    CHECK(kept.sentences[0].ids == std::vector<TokenId>(4, *v.find("a")));
    CHECK(kept.sentences[1].size() == 32);
    CHECK(kept.dialect == Dialect::B);
    CHECK(kept.sentences[0].dialect == Dialect::B);
  }

  TEST_CASE("sentences with out-of-vocabulary tokens are removed whole") {
    auto c = ws({"a a a a", "a a a rare", "a a a a a"});
    std::vector<TokenizedCorpus> both{c, {}};
    const auto v = build_joint_vocab(both, 2);
    const auto kept = filter_corpus(c, v, Dialect::A, 4, 32);
    CHECK(kept.size() == 2);
  }
}

TEST_SUITE("corpus.spearman") {
  TEST_CASE("fixed examples") {
    FreqTable f{{"a", 9}, {"b", 5}, {"c", 2}, {"d", 1}};
    CHECK(spearman_rank_correlation(f, f).rho == doctest::Approx(1.0));
    FreqTable r{{"a", 1}, {"b", 2}, {"c", 5}, {"d", 9}};
    CHECK(spearman_rank_correlation(f, r).rho == doctest::Approx(-1.0));
    FreqTable x{{"a", 30}, {"b", 20}, {"c", 10}}, y{{"a", 20}, {"b", 30}, {"c", 10}};
    CHECK(spearman_rank_correlation(x, y).rho == doctest::Approx(0.5).epsilon(1e-12));
  }

  TEST_CASE("matches 1 - 6 sum d^2 / (n (n^2 - 1)) on tie-free tables") {
    CHECK(probes::spearman_closed_form_gap(200) < 1e-12);
    FreqTable a{{"x", 5}, {"y", 3}, {"z", 9}, {"w", 1}}, b{{"x", 2}, {"y", 8}, {"z", 4}, {"w", 6}};
    CHECK(spearman_rank_correlation(a, b, std::nullopt, 0).rho ==
          doctest::Approx(spearman_rank_correlation(b, a, std::nullopt, 0).rho).epsilon(1e-15));
  }

  TEST_CASE("ties get average ranks") {
    const std::vector<double> v{5, 3, 3, 1};
    CHECK(average_ranks(v) == std::vector<double>{1.0, 2.5, 2.5, 4.0});
  }

  TEST_CASE("top-k ranks the k most frequent tokens of A found in B") {
    FreqTable a{{"a", 100}, {"b", 90}, {"z", 80}, {"c", 70}, {"d", 60}, {"e", 1}};
    FreqTable b{{"a", 5}, {"b", 6}, {"c", 7}, {"d", 8}, {"e", 100}};
    const auto r = spearman_rank_correlation(a, b, 3, 0);
    CHECK(r.n == 3);  // a, b, c
    CHECK(r.rho == doctest::Approx(-1.0));
  }

  TEST_CASE("too few shared tokens") {
    FreqTable a{{"a", 2}, {"b", 1}}, b{{"a", 1}, {"b", 2}};
    CHECK_THROWS_AS(spearman_rank_correlation(a, b), InsufficientDataError);
  }

  TEST_CASE("permutation p-value is small for strong correlation") {
    FreqTable a, b;
    for (int i = 1; i <= 30; ++i) {
      a["t" + std::to_string(i)] = static_cast<std::uint64_t>(i);
      b["t" + std::to_string(i)] = static_cast<std::uint64_t>(i + (i % 3));
    }
    const auto r = spearman_rank_correlation(a, b, std::nullopt, 500);
    CHECK(r.p_value < 0.01);
    CHECK(r.p_value > 0.0);
  }
}

TEST_SUITE("corpus.stats") {
  TEST_CASE("identical corpora share everything") {
    const auto c = ws({"a b c", "c d"});
    const auto [sa, sb] = corpus_stats(c, c);
    CHECK(sa.unique_token_count == 0);
    CHECK(sb.unique_token_count == 0);
    CHECK(sa.sentence_count == 2);
    CHECK(sa.vocab_size == 4);
  }

  TEST_CASE("disjoint vocabularies are entirely unique") {
    const auto [sa, sb] = corpus_stats(ws({"a b"}), ws({"c d e"}));
    CHECK(sa.unique_token_count == sa.vocab_size);
    CHECK(sb.unique_token_count == sb.vocab_size);
    CHECK(sb.vocab_size == 3);
    CHECK(sa.top_k_overlap == 0);
  }

  TEST_CASE("one differing token on each side") {
    const auto [sa, sb] = corpus_stats(ws({"a b c d"}), ws({"a b c e"}));
    CHECK(sa.unique_token_count == 1);
    CHECK(sb.unique_token_count == 1);
    CHECK(sa.top_k_overlap == 3);
  }

  TEST_CASE("json fields") {
    const auto [sa, sb] = corpus_stats(ws({"a b c d"}), ws({"a b c e"}));
    const auto j = nlohmann::json::parse(stats_to_json(sa));
    CHECK(j.at("sentence_count") == 1);
    CHECK(j.at("vocab_size") == 4);
    CHECK(j.at("unique_token_count") == 1);
  }
}
