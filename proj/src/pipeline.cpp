#include "dialect/pipeline.hpp"

namespace dialect::pipeline {

using corpus::TokenizedCorpus;

train::DevSet encode_parallel(const TokenizedCorpus& a, const TokenizedCorpus& b,
                              const corpus::Vocab& vocab, std::size_t min_len,
                              std::size_t max_len) {
  if (a.size() != b.size())
    throw std::invalid_argument("parallel set sides differ in length: " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  train::DevSet out;
  auto fits = [&](const corpus::Tokens& t) { return t.size() >= min_len && t.size() <= max_len; };
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!fits(a[i]) || !fits(b[i])) continue;
    out.a.push_back(Sentence{vocab.encode(a[i]), Dialect::A});
    out.b.push_back(Sentence{vocab.encode(b[i]), Dialect::B});
  }
  return out;
}

PreparedData prepare(const TokenizedCorpus& train_a, const TokenizedCorpus& train_b,
                     const TokenizedCorpus& dev_a, const TokenizedCorpus& dev_b,
                     const TokenizedCorpus& test_a, const TokenizedCorpus& test_b,
                     const config::DataConfig& cfg) {
  cfg.validate();
  PreparedData out;
  const TokenizedCorpus both[2] = {train_a, train_b};
  out.vocab = corpus::build_joint_vocab(both, cfg.min_freq);
  out.train_a = corpus::filter_corpus(train_a, out.vocab, Dialect::A, cfg.min_len, cfg.max_len);
  out.train_b = corpus::filter_corpus(train_b, out.vocab, Dialect::B, cfg.min_len, cfg.max_len);
  if (out.train_a.sentences.empty() || out.train_b.sentences.empty())
    throw corpus::InsufficientDataError("no training sentences survive filtering");
  out.dev = encode_parallel(dev_a, dev_b, out.vocab, cfg.min_len, cfg.max_len);
  out.test = encode_parallel(test_a, test_b, out.vocab, cfg.min_len, cfg.max_len);
  return out;
}

PreparedData prepare(const synth::SynthData& data, const config::DataConfig& cfg) {
  return prepare(data.train_a, data.train_b, data.dev_a, data.dev_b, data.test_a, data.test_b, cfg);
}

PreparedData prepare_dir(const std::filesystem::path& dir, const config::DataConfig& cfg) {
  const auto mode = corpus::parse_mode(cfg.tokenize);
  auto load = [&](const char* name) {
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) return TokenizedCorpus{};
    return corpus::tokenize_lines(corpus::read_lines(path), mode);
  };
  if (!std::filesystem::exists(dir / "train.A") || !std::filesystem::exists(dir / "train.B"))
    throw std::runtime_error(dir.string() + " lacks train.A / train.B");
  return prepare(load("train.A"), load("train.B"), load("dev.A"), load("dev.B"), load("test.A"),
                 load("test.B"), cfg);
}

}  // namespace dialect::pipeline
