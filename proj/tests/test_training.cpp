#include <fstream>

#include "dialect/config.hpp"
#include "dialect/pipeline.hpp"
#include "dialect/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace dialect;
using namespace dialect::train;
using model::ModelConfig;
using model::ParameterStore;
using model::Transformer;

namespace {

struct Fixture {
  pipeline::PreparedData data;
  ModelConfig model;
  TrainConfig train;
};

const pipeline::PreparedData& shared_data() {
  static const pipeline::PreparedData data = [] {
    synth::SynthConfig s;
    s.n_train_per_dialect = 400;
    s.n_dev = 16;
    s.n_test = 16;
    s.len_max = 8;
    s.check_targets = false;
    return pipeline::prepare(synth::generate_synthetic_pair(s), {});
  }();
  return data;
}

Fixture fixture() {
  Fixture f{shared_data(), {}, {}};
  f.model.n_layers = 1;
  f.model.model_dim = 16;
  f.model.pivot_dim = 8;
  f.model.n_heads = 2;
  f.model.ffn_dim = 32;
  f.model.n_shared_enc = f.model.n_shared_dec = 1;
  f.model.max_len = 32;
  f.model.dropout = 0.0;
  f.model.vocab_size = f.data.vocab.size();
  f.train.total_steps = 12;
  f.train.lambda_decay_steps = 6;
  f.train.batch_size = 4;
  f.train.warmup_steps = 3;
  f.train.eval_every = 4;
  f.train.dev_eval_sentences = 8;
  f.train.bt_max_len = 20;
  return f;
}

Trainer make_trainer(const Fixture& f, std::optional<ParameterStore<float>> init = std::nullopt) {
  return Trainer(f.model, f.train, f.data.train_a, f.data.train_b, f.data.dev, std::move(init));
}

std::vector<std::vector<float>> snapshot(const ParameterStore<float>& p) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : p.entries()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

std::vector<std::string> read_all(const std::filesystem::path& p) {
  std::vector<std::string> lines;
  std::ifstream in(p);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

std::string without_wallclock(const std::string& line) {
  auto j = config::Json::parse(line);
  j.erase("wallclock_s");
  return j.dump();
}

}  // namespace

TEST_SUITE("training.schedule") {
  TEST_CASE("lambda_com decays linearly from 1 to 0 and stays there") {
    TrainConfig c;
    c.lambda_decay_steps = 7;
    c.total_steps = 20;
    for (std::size_t s = 0; s < 20; ++s) {
      const auto l = lambda_schedule(s, c);
      CHECK(l.com == std::max(0.0, 1.0 - static_cast<double>(s) / 7.0));
      CHECK(l.div == 1.0);
    }
    CHECK(lambda_schedule(0, c).com == 1.0);
    CHECK(lambda_schedule(7, c).com == 0.0);
  }

  TEST_CASE("learning rate warms up linearly then stays constant") {
    TrainConfig c;
    c.lr = 1e-3;
    c.warmup_steps = 4;
    CHECK(learning_rate(0, c) == doctest::Approx(0.25e-3));
    CHECK(learning_rate(2, c) == doctest::Approx(0.75e-3));
    CHECK(learning_rate(3, c) == doctest::Approx(1e-3));
    CHECK(learning_rate(1000, c) == doctest::Approx(1e-3));
    c.warmup_steps = 0;
    CHECK(learning_rate(0, c) == 1e-3);
  }

  TEST_CASE("invalid training settings") {
    TrainConfig c;
    c.lambda_decay_steps = c.total_steps + 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.eval_every = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}

TEST_SUITE("training.optimizer") {
  void set_grad(ParameterStore<float>& store, const std::vector<std::vector<float>>& g) {
    ad::Tape<float> tape;
    ad::TapeScope<float> scope(&tape);
    store.zero_grad();
    Tensor<float> total;
    for (std::size_t i = 0; i < store.entries().size(); ++i) {
      const auto& t = store.entries()[i].second;
      auto term = ad::sum(ad::mul(t, Tensor<float>(t.shape(), g[i])));
      total = i == 0 ? term : ad::add(total, term);
    }
    tape.backward(total);
  }

  TEST_CASE("Adam matches a double-precision reference over several steps") {
    ParameterStore<float> store;
    store.add("w", Tensor<float>({3}, {0.5f, -1.0f, 2.0f}, true));
    store.add("b", Tensor<float>({2}, {0.0f, 0.25f}, true));
    TrainConfig c;
    auto state = make_adam_state(store);
    std::vector<double> w{0.5, -1.0, 2.0, 0.0, 0.25}, m(5, 0.0), v(5, 0.0);
    const std::vector<std::vector<std::vector<float>>> grads{
        {{0.3f, -2.0f, 0.0f}, {1e-3f, -0.5f}},
        {{-0.1f, -1.0f, 0.7f}, {2.0f, 0.0f}},
        {{0.2f, 0.2f, -0.2f}, {0.5f, 0.5f}}};
    for (std::size_t t = 1; t <= grads.size(); ++t) {
      set_grad(store, grads[t - 1]);
      const double lr = 0.01 * static_cast<double>(t);
      adam_update(store, state, lr, c);
      std::vector<double> g;
      for (const auto& part : grads[t - 1]) g.insert(g.end(), part.begin(), part.end());
      for (std::size_t k = 0; k < 5; ++k) {
        m[k] = c.adam_beta1 * m[k] + (1 - c.adam_beta1) * g[k];
        v[k] = c.adam_beta2 * v[k] + (1 - c.adam_beta2) * g[k] * g[k];
        const double mh = m[k] / (1 - std::pow(c.adam_beta1, t));
        const double vh = v[k] / (1 - std::pow(c.adam_beta2, t));
        w[k] -= lr * mh / (std::sqrt(vh) + c.adam_eps);
      }
      std::vector<float> got;
      for (const auto& [name, p] : store.entries()) got.insert(got.end(), p.data().begin(), p.data().end());
      for (std::size_t k = 0; k < 5; ++k) CHECK(got[k] == doctest::Approx(w[k]).epsilon(1e-6));
    }
    // first step moves each coordinate by about lr * sign(g)
    CHECK(state.t == 3);
  }

  TEST_CASE("global-norm clipping") {
    ParameterStore<float> store;
    store.add("a", Tensor<float>({2}, {1.0f, 1.0f}, true));
    store.add("b", Tensor<float>({1}, {1.0f}, true));
    set_grad(store, {{3.0f, 0.0f}, {4.0f}});
    CHECK(clip_grad_norm(store, 10.0) == doctest::Approx(5.0));
    CHECK(store.get("a").grad()[0] == 3.0f);
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
    CHECK(store.get("a").grad()[0] == doctest::Approx(0.6));
    CHECK(store.get("b").grad()[0] == doctest::Approx(0.8));
    CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(1.0));
  }
}

TEST_SUITE("training.losses") {
  TEST_CASE("back-translation records nothing on the tape and respects length caps") {
    auto f = fixture();
    Transformer<float> m(f.model, model::build_model<float>(f.model, 5));
    std::vector<Sentence> batch(f.data.train_a.sentences.begin(), f.data.train_a.sentences.begin() + 6);
    ad::Tape<float> tape;
    ad::TapeScope<float> scope(&tape);
    const auto bt = backtranslate_batch(m, batch, 9);
    CHECK(tape.size() == 0);
    CHECK(bt.true_target == batch);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      CHECK(bt.synthetic_source[i].dialect == Dialect::B);
      CHECK(bt.synthetic_source[i].size() >= 1);
      CHECK(bt.synthetic_source[i].size() <= std::min<std::size_t>(9, batch[i].size() * 13 / 10 + 5));
    }
    CHECK(backtranslate_batch(m, batch, 9).synthetic_source == bt.synthetic_source);
  }

  TEST_CASE("degenerate models: EOS-only output is clamped to one token, and run-on output to the cap") {
    auto f = fixture();
    for (const TokenId favoured : {kEos, static_cast<TokenId>(kNumSpecials + 3)}) {
      auto params = model::build_model<float>(f.model, 2);
      // a huge output bias makes `favoured` win at every position
      for (const auto& [name, t] : params.entries())
        if (name == "out.b") {
          Tensor<float> h = t;
          for (float& x : h.data()) x = 0.0f;
          h.data()[static_cast<std::size_t>(favoured)] = 1e4f;
        }
      Transformer<float> m(f.model, std::move(params));
      std::vector<Sentence> batch(f.data.train_b.sentences.begin(), f.data.train_b.sentences.begin() + 5);
      const auto bt = backtranslate_batch(m, batch, 32);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::size_t cap = batch[i].size() * 13 / 10 + 5;
        if (favoured == kEos) {
          REQUIRE(bt.synthetic_source[i].size() == 1);
        } else {
          CHECK(bt.synthetic_source[i].size() == cap);
          CHECK(bt.synthetic_source[i].dialect == Dialect::A);
        }
      }
    }
  }

  TEST_CASE("oracle back-translation reduces the diversity loss to supervised cross-entropy") {
    auto f = fixture();
    Transformer<float> m(f.model, model::build_model<float>(f.model, 9));
    const auto& dev = f.data.dev;
    BackTranslatedBatch bt_a{{dev.b.begin(), dev.b.begin() + 4}, {dev.a.begin(), dev.a.begin() + 4}};
    BackTranslatedBatch bt_b{{dev.a.begin(), dev.a.begin() + 4}, {dev.b.begin(), dev.b.begin() + 4}};
    const float got = loss_diversity(m, bt_a, bt_b).item();
    const float want = m.loss(bt_a.synthetic_source, bt_a.true_target).item() +
                       m.loss(bt_b.synthetic_source, bt_b.true_target).item();
    CHECK(got == doctest::Approx(want).epsilon(1e-6));
  }

  TEST_CASE("commonality loss with noise disabled is plain reconstruction") {
    auto f = fixture();
    Transformer<float> m(f.model, model::build_model<float>(f.model, 4));
    std::vector<Sentence> a(f.data.train_a.sentences.begin(), f.data.train_a.sentences.begin() + 3);
    std::vector<Sentence> b(f.data.train_b.sentences.begin(), f.data.train_b.sentences.begin() + 3);
    noise::NoiseConfig off{0.0, 0.0, 0, 0};
    const float got = loss_commonality(m, a, b, off, 17).item();
    CHECK(got == doctest::Approx(m.loss(a, a).item() + m.loss(b, b).item()).epsilon(1e-6));
    CHECK_THROWS(loss_commonality(m, {}, b, off, 17));
  }
}

TEST_SUITE("training.reconstruction") {
  TEST_CASE("accuracy of a constant predictor is the frequency of its token") {
    auto f = fixture();
    const auto favoured = static_cast<TokenId>(kNumSpecials);
    auto params = model::build_model<float>(f.model, 2);
    for (const auto& [name, t] : params.entries())
      if (name == "out.b") {
        Tensor<float> h = t;
        h.data()[static_cast<std::size_t>(favoured)] = 1e4f;
      }
    Transformer<float> m(f.model, std::move(params));
    const auto& sents = f.data.dev.a;
    std::size_t hits = 0, total = 0;
    for (const auto& s : sents)
      for (auto id : s.ids) {
        hits += id == favoured;
        ++total;
      }
    const double acc = reconstruction_accuracy(m, sents, f.train.noise, 3, 5);
    CHECK(acc == doctest::Approx(static_cast<double>(hits) / total).epsilon(1e-12));
    CHECK(hits > 0);
  }

  TEST_CASE("batching does not change the result") {
    auto f = fixture();
    Transformer<float> m(f.model, model::build_model<float>(f.model, 8));
    const auto& sents = f.data.dev.b;
    const double one = reconstruction_accuracy(m, sents, f.train.noise, 3, 1);
    CHECK(reconstruction_accuracy(m, sents, f.train.noise, 3, 7) == doctest::Approx(one).epsilon(1e-12));
    CHECK(reconstruction_accuracy(m, sents, f.train.noise, 3, 100) == doctest::Approx(one).epsilon(1e-12));
  }

  TEST_CASE("commonality-only training skips back-translation") {
    auto f = fixture();
    f.train.lambda_div = 0.0;
    f.train.lambda_com_end = 1.0;
    auto t = make_trainer(f);
    const auto r = t.step();
    CHECK(r.loss_div == 0.0);
    CHECK(r.loss_total == doctest::Approx(r.loss_com));
    f.train.lambda_com_end = 0.0;
    CHECK_THROWS_AS(f.train.validate(), ConfigError);
  }
}

TEST_SUITE("training.step") {
  // Recomputes one step by hand from the public pieces: batch sampling, the
  // weighted objective, clipping and Adam.
  void check_step_against_manual(Trainer& trainer, const Fixture& f) {
    const std::size_t s = trainer.current_step();
    auto params = model::clone_store(trainer.model().params());
    AdamState adam = trainer.adam();
    Transformer<float> m(f.model, model::clone_store(params));

    auto sample = [&](const Corpus& c, std::uint64_t stream) {
      Rng rng(derive_seed(f.train.seed, s, stream));
      std::vector<Sentence> out;
      for (std::size_t i = 0; i < f.train.batch_size; ++i) out.push_back(c.sentences[rng.below(c.size())]);
      return out;
    };
    const auto a = sample(f.data.train_a, 1), b = sample(f.data.train_b, 2);
    const auto lam = lambda_schedule(s, f.train);

    ad::Tape<float> tape;
    ad::TapeScope<float> scope(&tape);
    const auto bt_a = backtranslate_batch(m, a, f.train.bt_max_len);
    const auto bt_b = backtranslate_batch(m, b, f.train.bt_max_len);
    Tensor<float> lc;
    if (lam.com > 0) {
      lc = loss_commonality(m, a, b, f.train.noise, derive_seed(f.train.seed, s, 4));
    } else {
      ad::NoGradScope<float> off;
      lc = loss_commonality(m, a, b, f.train.noise, derive_seed(f.train.seed, s, 4));
    }
    auto total = ad::scale(loss_diversity(m, bt_a, bt_b), static_cast<float>(lam.div));
    if (lam.com > 0) total = ad::add(ad::scale(lc, static_cast<float>(lam.com)), total);
    tape.backward(total);
    clip_grad_norm(m.params(), f.train.grad_clip_norm);
    adam_update(m.params(), adam, learning_rate(s, f.train), f.train);

    const auto rec = trainer.step();
    CHECK(rec.step == s);
    CHECK(rec.lambda_com == lam.com);
    CHECK(rec.loss_total == doctest::Approx(total.item()).epsilon(1e-5));
    CHECK(rec.loss_com == doctest::Approx(lc.item()).epsilon(1e-5));
    const auto got = snapshot(trainer.model().params()), want = snapshot(m.params());
    double worst = 0;
    for (std::size_t i = 0; i < got.size(); ++i)
      for (std::size_t k = 0; k < got[i].size(); ++k) worst = std::max(worst, std::abs(double(got[i][k]) - want[i][k]));
    CHECK(worst < 1e-6);
  }

  TEST_CASE("trainer step equals the hand-assembled objective, before and after the decay") {
    auto f = fixture();
    f.train.lambda_decay_steps = 2;
    auto trainer = make_trainer(f);
    check_step_against_manual(trainer, f);  // lambda_com = 1
    check_step_against_manual(trainer, f);  // 0.5
    check_step_against_manual(trainer, f);  // 0
  }

  TEST_CASE("only the diversity loss drives updates once lambda_com reaches zero") {
    auto f = fixture();
    f.train.lambda_decay_steps = 1;
    f.train.noise = noise::NoiseConfig{0.5, 0.5, 3, 0};
    auto t1 = make_trainer(f);
    t1.step();
    auto f2 = f;
    f2.train.noise = noise::NoiseConfig{0.0, 0.0, 0, 0};  // different commonality loss
    auto t2 = make_trainer(f2, model::clone_store(t1.model().params()));
    auto t1b = make_trainer(f, model::clone_store(t1.model().params()));
    // fresh optimizers at step 0 would use lambda_com = 1; align the step counters
    testutil::TempDir dir("iso");
    t1.save_state(dir.path() / "s");
    t2.load_state(dir.path() / "s");
    t1b.load_state(dir.path() / "s");
    const auto r1 = t1b.step(), r2 = t2.step();
    CHECK(r1.lambda_com == 0.0);
    CHECK(r1.loss_com != r2.loss_com);
    CHECK(snapshot(t1b.model().params()) == snapshot(t2.model().params()));
  }
}

TEST_SUITE("training.loop") {
  TEST_CASE("metrics schema, evaluation cadence and logged lambdas") {
    auto f = fixture();
    testutil::TempDir dir("loop");
    auto trainer = make_trainer(f);
    const auto res = run_training(trainer, {dir.path()});
    REQUIRE(res.records.size() == 12);
    const auto lines = read_all(dir.path() / "metrics.jsonl");
    REQUIRE(lines.size() == 12);
    const std::vector<std::string> keys{"step", "lambda_com", "lambda_div", "loss_com", "loss_div",
                                        "loss_total", "dev_bleu_AB", "dev_bleu_BA", "wallclock_s"};
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const auto j = config::Json::parse(lines[i]);
      std::vector<std::string> got;
      for (const auto& [k, v] : j.items()) got.push_back(k);
      CHECK(got == keys);
      CHECK(j["step"] == i);
      CHECK(j["lambda_com"].get<double>() == std::max(0.0, 1.0 - static_cast<double>(i) / 6.0));
      const bool eval = (i + 1) % 4 == 0;
      CHECK(j["dev_bleu_AB"].is_null() == !eval);
      CHECK(j["dev_bleu_BA"].is_null() == !eval);
    }
    for (const char* file : {"best.ckpt", "last.ckpt", "last.state"})
      CHECK(std::filesystem::exists(dir.path() / file));
    CHECK(res.best_step % 4 == 0);
    CHECK(res.best_dev_bleu >= 0.0);
    CHECK_FALSE(res.early_stopped);
  }

  TEST_CASE("identical seeds give identical runs; a different seed does not") {
    auto f = fixture();
    auto t1 = make_trainer(f), t2 = make_trainer(f);
    const auto r1 = run_training(t1, {}), r2 = run_training(t2, {});
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
      auto a = r1.records[i], b = r2.records[i];
      a.wallclock_s = b.wallclock_s = 0;
      CHECK(metrics_to_json(a) == metrics_to_json(b));
    }
    CHECK(snapshot(t1.model().params()) == snapshot(t2.model().params()));
    f.train.seed = 2;
    auto t3 = make_trainer(f);
    CHECK(t3.step().loss_total != r1.records[0].loss_total);
  }

  TEST_CASE("resuming reproduces the uninterrupted trajectory") {
    auto f = fixture();
    testutil::TempDir full("full"), split("split");
    auto t1 = make_trainer(f);
    run_training(t1, {full.path()});

    auto t2 = make_trainer(f);
    run_training(t2, {split.path(), std::nullopt, 6});
    // a stale tail from an interrupted later step must be dropped on resume
    std::ofstream(split.path() / "metrics.jsonl", std::ios::app)
        << R"({"step":6,"lambda_com":0,"lambda_div":1,"loss_com":0,"loss_div":0,"loss_total":0,"dev_bleu_AB":null,"dev_bleu_BA":null,"wallclock_s":0})"
        << '\n';
    auto [params, cfg] = model::load_checkpoint(split.path() / "last.ckpt", f.model);
    auto t3 = make_trainer(f, std::move(params));
    run_training(t3, {split.path(), split.path() / "last.state"});

    const auto a = read_all(full.path() / "metrics.jsonl"), b = read_all(split.path() / "metrics.jsonl");
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(without_wallclock(a[i]) == without_wallclock(b[i]));
    CHECK(snapshot(t1.model().params()) == snapshot(t3.model().params()));
    CHECK(t1.progress().best_step == t3.progress().best_step);
  }

  TEST_CASE("patience stops training after evaluations without improvement") {
    auto f = fixture();
    f.train.lr = 1e-12;  // frozen model: dev BLEU never improves after the first evaluation
    f.train.patience = 2;
    f.train.eval_every = 2;
    auto t = make_trainer(f);
    const auto res = run_training(t, {});
    CHECK(res.early_stopped);
    CHECK(res.records.size() == 6);
    CHECK(res.best_step == 2);
  }

  TEST_CASE("training state files reject mismatched models") {
    auto f = fixture();
    testutil::TempDir dir("state");
    auto t = make_trainer(f);
    t.save_state(dir.path() / "s");
    auto g = f;
    g.model.ffn_dim = 48;
    auto other = make_trainer(g);
    CHECK_THROWS_AS(other.load_state(dir.path() / "s"), model::CheckpointError);
    model::save_checkpoint(t.model().params(), f.model, dir.path() / "ckpt");
    CHECK_THROWS_AS(t.load_state(dir.path() / "ckpt"), model::CheckpointError);
  }
}
