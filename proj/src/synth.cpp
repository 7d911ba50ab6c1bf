#include "dialect/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "dialect/config.hpp"
#include "dialect/rng.hpp"

namespace dialect::synth {

namespace {

using corpus::Tokens;
using corpus::TokenizedCorpus;

constexpr std::uint64_t kStreamGraph = 1, kStreamSentences = 2, kStreamRules = 3;

std::string encode_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

std::size_t sample_weighted(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(it - cumulative.begin(), cumulative.size() - 1);
}

// Bigram chain: token i may only be followed by successors[i] (a uniform
// random subset), drawn with Zipf weights restricted to that set.
struct Language {
  std::vector<double> start_cdf;
  std::vector<std::vector<std::size_t>> successors;
  std::vector<std::vector<double>> successor_cdf;
};

Language build_language(const SynthConfig& cfg) {
  const std::size_t V = cfg.base_vocab_size;
  std::vector<double> weight(V);
  for (std::size_t i = 0; i < V; ++i)
    weight[i] = 1.0 / std::pow(static_cast<double>(i + 1), cfg.zipf_exponent);
  Language lang;
  std::partial_sum(weight.begin(), weight.end(), std::back_inserter(lang.start_cdf));

  Rng rng(derive_seed(cfg.seed, kStreamGraph));
  lang.successors.resize(V);
  std::vector<bool> has_predecessor(V, false);
  std::vector<std::size_t> all(V);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < V; ++i) {
    // partial Fisher-Yates: a uniform K-subset
    for (std::size_t k = 0; k < cfg.successor_count; ++k) {
      std::swap(all[k], all[k + rng.below(V - k)]);
      lang.successors[i].push_back(all[k]);
      has_predecessor[all[k]] = true;
    }
  }
  for (std::size_t j = 0; j < V; ++j) {
    if (has_predecessor[j]) continue;
    const std::size_t i = rng.below(V);
    lang.successors[i][rng.below(lang.successors[i].size())] = j;
  }
  lang.successor_cdf.resize(V);
  for (std::size_t i = 0; i < V; ++i) {
    std::sort(lang.successors[i].begin(), lang.successors[i].end());
    for (auto j : lang.successors[i]) {
      const double prev = lang.successor_cdf[i].empty() ? 0.0 : lang.successor_cdf[i].back();
      lang.successor_cdf[i].push_back(prev + weight[j]);
    }
  }
  return lang;
}

std::vector<std::size_t> sample_sentence(const Language& lang, const SynthConfig& cfg, Rng& rng) {
  const std::size_t len = cfg.len_min + rng.below(cfg.len_max - cfg.len_min + 1);
  std::vector<std::size_t> s{sample_weighted(lang.start_cdf, rng)};
  while (s.size() < len) {
    const auto& succ = lang.successors[s.back()];
    s.push_back(succ[sample_weighted(lang.successor_cdf[s.back()], rng)]);
  }
  return s;
}

Tokens render(const std::vector<std::size_t>& ids) {
  Tokens out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(token_text(i));
  return out;
}

std::string key_of(const std::vector<std::size_t>& ids) {
  std::string k;
  for (auto i : ids) k += std::to_string(i) + ",";
  return k;
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synth config: " + msg); };
  if (base_vocab_size < 2) fail("base_vocab_size must be at least 2");
  if (!(zipf_exponent >= 0.0)) fail("zipf_exponent must be non-negative");
  if (successor_count == 0 || successor_count > base_vocab_size)
    fail("successor_count must lie in [1, base_vocab_size]");
  if (len_min < 4 || len_max > 32 || len_min > len_max) fail("length bounds must lie in [4, 32]");
  if (n_train_per_dialect == 0) fail("n_train_per_dialect must be positive");
  if (!(substitution_fraction >= 0.0 && substitution_fraction <= 1.0))
    fail("substitution_fraction must lie in [0, 1]");
  if (substitution_top > base_vocab_size) fail("substitution_top exceeds base_vocab_size");
  if (partner_rank_max < substitution_top || partner_rank_max > base_vocab_size)
    fail("partner_rank_max must lie in [substitution_top, base_vocab_size]");
  const auto n_sub = static_cast<std::size_t>(std::llround(substitution_fraction * substitution_top));
  if (n_sub > partner_rank_max - substitution_top)
    fail("not enough partner tokens for " + std::to_string(n_sub) + " substitutions");
  if (unique_token_count > base_vocab_size - partner_rank_max)
    fail("unique_token_count " + std::to_string(unique_token_count) +
         " exceeds the vocabulary headroom of " + std::to_string(base_vocab_size - partner_rank_max));
}

// ---- RuleTable ------------------------------------------------------------

void RuleTable::add(const std::string& src, const std::string& trg) {
  if (map_.count(src)) throw ConfigError("rule table: '" + src + "' mapped twice");
  if (reverse_.count(trg)) throw ConfigError("rule table: '" + trg + "' is a target twice");
  map_.emplace(src, trg);
  reverse_.emplace(trg, src);
}

RuleTable RuleTable::inverse() const {
  RuleTable inv(to_, from_);
  for (const auto& [src, trg] : map_) inv.add(trg, src);
  return inv;
}

Tokens RuleTable::apply(const Tokens& tokens) const {
  Tokens out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto it = map_.find(t);
    out.push_back(it == map_.end() ? t : it->second);
  }
  return out;
}

std::unordered_map<TokenId, TokenId> RuleTable::compile(const corpus::Vocab& vocab) const {
  std::unordered_map<TokenId, TokenId> out;
  for (const auto& [src, trg] : map_) {
    auto s = vocab.find(src);
    auto t = vocab.find(trg);
    if (s && t) out.emplace(*s, *t);
  }
  return out;
}

void RuleTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# " << dialect_name(from_) << "->" << dialect_name(to_) << '\n';
  for (const auto& [src, trg] : map_) out << src << '\t' << trg << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

RuleTable RuleTable::load(const std::filesystem::path& path) {
  const auto lines = corpus::read_lines(path);
  RuleTable table;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto& line = lines[n];
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto arrow = line.find("->");
      if (arrow != std::string::npos && arrow >= 3) {
        table.from_ = parse_dialect(line.substr(2, arrow - 2));
        table.to_ = parse_dialect(line.substr(arrow + 2));
      }
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size() ||
        line.find('\t', tab + 1) != std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(n + 1) + ": expected src<TAB>trg");
    table.add(line.substr(0, tab), line.substr(tab + 1));
  }
  return table;
}

Sentence rule_based_translate(const Sentence& sentence,
                              const std::unordered_map<TokenId, TokenId>& table, Dialect to) {
  Sentence out{sentence.ids, to};
  for (auto& id : out.ids) {
    auto it = table.find(id);
    if (it != table.end()) id = it->second;
  }
  return out;
}

Sentence rule_based_translate(const Sentence& sentence, const RuleTable& table,
                              const corpus::Vocab& vocab) {
  return rule_based_translate(sentence, table.compile(vocab), table.to());
}

// ---- generation -----------------------------------------------------------

std::string token_text(std::size_t index) {
  return encode_utf8(static_cast<char32_t>(0x4E00 + index));
}

SynthData generate_synthetic_pair(const SynthConfig& cfg) {
  cfg.validate();
  const auto lang = build_language(cfg);
  Rng rng(derive_seed(cfg.seed, kStreamSentences));

  std::unordered_set<std::string> seen_a, seen_b, seen_eval;
  auto draw = [&](std::size_t n, auto&& accept, auto&& on_keep) {
    std::vector<std::vector<std::size_t>> out;
    const std::size_t max_attempts = 50 * n + 1000;
    for (std::size_t attempts = 0; out.size() < n; ++attempts) {
      if (attempts >= max_attempts)
        throw ConfigError("synth: cannot draw " + std::to_string(n) +
                          " distinct sentences; widen the length range or vocabulary");
      auto s = sample_sentence(lang, cfg, rng);
      const auto key = key_of(s);
      if (!accept(key)) continue;
      on_keep(key);
      out.push_back(std::move(s));
    }
    return out;
  };
  const auto pool_a = draw(
      cfg.n_train_per_dialect, [](const std::string&) { return true; },
      [&](const std::string& k) { seen_a.insert(k); });
  const auto pool_b = draw(
      cfg.n_train_per_dialect, [&](const std::string& k) { return !seen_a.count(k); },
      [&](const std::string& k) { seen_b.insert(k); });
  auto fresh = [&](const std::string& k) {
    return !seen_a.count(k) && !seen_b.count(k) && !seen_eval.count(k);
  };
  auto keep_eval = [&](const std::string& k) { seen_eval.insert(k); };
  const auto dev = draw(cfg.n_dev, fresh, keep_eval);
  const auto test = draw(cfg.n_test, fresh, keep_eval);

  // Ranks by observed frequency in the A training pool.
  std::vector<std::uint64_t> counts(cfg.base_vocab_size, 0);
  for (const auto& s : pool_a)
    for (auto i : s) ++counts[i];
  std::vector<std::size_t> by_rank(cfg.base_vocab_size);
  std::iota(by_rank.begin(), by_rank.end(), 0);
  std::stable_sort(by_rank.begin(), by_rank.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });

  Rng rule_rng(derive_seed(cfg.seed, kStreamRules));
  auto pick = [&](std::size_t lo, std::size_t hi, std::size_t n) {
    std::vector<std::size_t> ranks(hi - lo);
    std::iota(ranks.begin(), ranks.end(), lo);
    for (std::size_t i = ranks.size(); i > 1; --i) std::swap(ranks[i - 1], ranks[rule_rng.below(i)]);
    ranks.resize(n);
    return ranks;
  };
  const auto n_sub =
      static_cast<std::size_t>(std::llround(cfg.substitution_fraction * cfg.substitution_top));
  // heads: frequency-weighted draw without replacement from the top ranks
  std::vector<std::size_t> heads;
  {
    std::vector<double> w(cfg.substitution_top);
    for (std::size_t r = 0; r < w.size(); ++r) w[r] = static_cast<double>(counts[by_rank[r]]) + 1.0;
    for (std::size_t k = 0; k < n_sub; ++k) {
      std::vector<double> cdf;
      std::partial_sum(w.begin(), w.end(), std::back_inserter(cdf));
      const auto r = sample_weighted(cdf, rule_rng);
      heads.push_back(r);
      w[r] = 0.0;
    }
  }
  const auto partners = pick(cfg.substitution_top, cfg.partner_rank_max, n_sub);
  const auto mids = pick(cfg.partner_rank_max, cfg.base_vocab_size, cfg.unique_token_count);

  SynthData data;
  data.rules = RuleTable(Dialect::A, Dialect::B);
  for (std::size_t i = 0; i < n_sub; ++i) {
    const auto a = token_text(by_rank[heads[i]]);
    const auto z = token_text(by_rank[partners[i]]);
    data.rules.add(a, z);
    data.rules.add(z, a);
  }
  for (std::size_t i = 0; i < mids.size(); ++i)
    data.rules.add(token_text(by_rank[mids[i]]), token_text(cfg.base_vocab_size + i));

  for (const auto& s : pool_a) data.train_a.push_back(render(s));
  for (const auto& s : pool_b) data.train_b.push_back(data.rules.apply(render(s)));
  for (const auto& s : dev) {
    data.dev_a.push_back(render(s));
    data.dev_b.push_back(data.rules.apply(data.dev_a.back()));
  }
  for (const auto& s : test) {
    data.test_a.push_back(render(s));
    data.test_b.push_back(data.rules.apply(data.test_a.back()));
  }

  const auto fa = corpus::count_tokens(data.train_a);
  const auto fb = corpus::count_tokens(data.train_b);
  data.stats.full_spearman = corpus::spearman_rank_correlation(fa, fb).rho;
  data.stats.top_spearman = corpus::spearman_rank_correlation(fa, fb, cfg.substitution_top).rho;
  for (const auto& [tok, n] : fa) data.stats.unique_a += fb.count(tok) ? 0 : 1;
  for (const auto& [tok, n] : fb) data.stats.unique_b += fa.count(tok) ? 0 : 1;

  if (cfg.check_targets &&
      !(data.stats.full_spearman > cfg.full_spearman_min &&
        data.stats.top_spearman < cfg.top_spearman_max))
    throw ConfigError("synth: generated corpora miss the rank-correlation targets (full " +
                      std::to_string(data.stats.full_spearman) + ", top-" +
                      std::to_string(cfg.substitution_top) + " " +
                      std::to_string(data.stats.top_spearman) + ")");
  return data;
}

void write_synth_data(const SynthData& data, const SynthConfig& cfg,
                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&](const std::string& name, const TokenizedCorpus& c) {
    std::vector<std::string> lines;
    lines.reserve(c.size());
    for (const auto& t : c) lines.push_back(corpus::detokenize(t, corpus::TokenizeMode::Char));
    corpus::write_lines(dir / name, lines);
  };
  write("train.A", data.train_a);
  write("train.B", data.train_b);
  write("dev.A", data.dev_a);
  write("dev.B", data.dev_b);
  write("test.A", data.test_a);
  write("test.B", data.test_b);
  data.rules.save(dir / "rules.tsv");

  config::Json j;
  j["config"] = config::to_json(cfg);
  j["stats"] = {{"full_spearman", data.stats.full_spearman},
                {"top_spearman", data.stats.top_spearman},
                {"top_k", cfg.substitution_top},
                {"unique_a", data.stats.unique_a},
                {"unique_b", data.stats.unique_b},
                {"rules", data.rules.size()}};
  std::ofstream out(dir / "synth.json", std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write synth.json in " + dir.string());
}

}  // namespace dialect::synth
