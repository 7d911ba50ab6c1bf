#include <fstream>

#include "dialect/config.hpp"
#include "dialect/pipeline.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dialect;
using config::Json;

namespace {

std::filesystem::path repo_config(const char* name) {
  return std::filesystem::path(DIALECT_SOURCE_DIR) / "configs" / name;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("json round trip preserves every field") {
    config::RunConfig c;
    c.model.n_layers = 3;
    c.model.pivot_dim = 40;
    c.model.layer_coordination = false;
    c.train.lambda_decay_steps = 1234;
    c.train.noise.n_swaps = 2;
    c.decode.beam_size = 5;
    c.data.tokenize = "whitespace";
    c.synth.seed = 77;
    const auto j = config::to_json(c);
    const auto back = config::run_from_json(j);
    CHECK(config::to_json(back) == j);
    CHECK(back.model.pivot_dim == 40);
    CHECK_FALSE(back.model.layer_coordination);
    CHECK(back.train.noise.n_swaps == 2);
    CHECK(back.decode.beam_size == 5);
  }

  TEST_CASE("missing keys keep defaults") {
    const auto c = config::run_from_json(Json::parse(R"({"train": {"lr": 0.01}})"));
    CHECK(c.train.lr == 0.01);
    CHECK(c.train.batch_size == train::TrainConfig{}.batch_size);
    CHECK(c.model.model_dim == model::ModelConfig{}.model_dim);
  }

  TEST_CASE("unknown keys, wrong types and invalid values are rejected") {
    CHECK_THROWS_AS(config::run_from_json(Json::parse(R"({"trian": {}})")), ConfigError);
    CHECK_THROWS_AS(config::run_from_json(Json::parse(R"({"train": {"lrr": 1}})")), ConfigError);
    CHECK_THROWS_AS(config::run_from_json(Json::parse(R"({"model": {"n_layers": "six"}})")), ConfigError);
    CHECK_THROWS_AS(config::run_from_json(Json::parse(R"({"model": 3})")), ConfigError);
    CHECK_THROWS_AS(config::run_from_json(Json::parse(R"({"data": {"min_len": 9, "max_len": 4}})")),
                    ConfigError);
    CHECK_THROWS_AS(config::run_from_json(Json::parse(R"({"model": {"pivot_dim": 1000}})")).validate(), ConfigError);
  }

  TEST_CASE("files: missing, malformed, and the checked-in configs") {
    testutil::TempDir dir("cfg");
    CHECK_THROWS_AS(config::load_run_config(dir.path() / "nope.json"), ConfigError);
    std::ofstream(dir.path() / "bad.json") << "{ not json";
    CHECK_THROWS_AS(config::load_run_config(dir.path() / "bad.json"), ConfigError);
    for (const char* name : {"desk.json", "full_scale.json", "smoke.json"}) {
      const auto c = config::load_run_config(repo_config(name));
      CHECK(c.model.pivot_dim * 2 == c.model.model_dim);
      CHECK(c.model.layer_coordination);
      CHECK(c.data.min_len == 4);
      CHECK(c.data.max_len == 32);
    }
    const auto full = config::load_run_config(repo_config("full_scale.json"));
    CHECK(full.model.n_layers == 6);
    CHECK(full.model.model_dim == 512);
  }
}

TEST_SUITE("pipeline") {
  corpus::TokenizedCorpus tok(std::initializer_list<const char*> lines) {
    corpus::TokenizedCorpus out;
    for (const char* l : lines) out.push_back(corpus::tokenize(l, corpus::TokenizeMode::Char));
    return out;
  }

  TEST_CASE("joint vocabulary, length filter and parallel encoding") {
    config::DataConfig cfg;
    const auto ta = tok({"abcd", "abc", "aabbccdd"});
    const auto tb = tok({"bbcd", "bcdeb"});
    const auto p = pipeline::prepare(ta, tb, tok({"abce", "ab"}), tok({"bbcz", "abcd"}), {}, {}, cfg);
    // counts: a4 b8 c6 d5 e1
    std::vector<std::string> want{"b", "c", "d", "a", "e"};
    CHECK(p.vocab.size() == kNumSpecials + want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(p.vocab.token(static_cast<TokenId>(kNumSpecials + i)) == want[i]);
    CHECK(p.train_a.sentences.size() == 2);  // "abc" is too short
    CHECK(p.train_b.sentences.size() == 2);
    CHECK(p.train_b.dialect == Dialect::B);
    REQUIRE(p.dev.a.size() == 1);  // the pair with a 2-token side is dropped
    CHECK(p.dev.b[0].ids.back() == kUnk);
    CHECK(p.dev.a[0].dialect == Dialect::A);
    CHECK(p.test.a.empty());
  }

  TEST_CASE("directory loading") {
    testutil::TempDir dir("pipe");
    CHECK_THROWS(pipeline::prepare_dir(dir.path(), {}));
    corpus::write_lines(dir.path() / "train.A", std::vector<std::string>{"abcd", "bcda"});
    corpus::write_lines(dir.path() / "train.B", std::vector<std::string>{"abcd"});
    const auto p = pipeline::prepare_dir(dir.path(), {});
    CHECK(p.train_a.sentences.size() == 2);
    CHECK(p.dev.a.empty());
  }

  TEST_CASE("synthetic data prepares losslessly") {
    synth::SynthConfig s;
    s.n_train_per_dialect = 1000;
    s.n_dev = 50;
    s.n_test = 50;
    s.check_targets = false;
    const auto d = synth::generate_synthetic_pair(s);
    const auto p = pipeline::prepare(d, {});
    CHECK(p.train_a.sentences.size() == 1000);
    CHECK(p.dev.a.size() == 50);
    for (std::size_t i = 0; i < p.test.b.size(); ++i) CHECK(p.vocab.decode(p.test.b[i].ids) == d.test_b[i]);
  }
}
