#include "dialect/corpus.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dialect/rng.hpp"

namespace dialect {

Dialect parse_dialect(const std::string& name) {
  if (name == "A" || name == "a") return Dialect::A;
  if (name == "B" || name == "b") return Dialect::B;
  throw ConfigError("unknown dialect '" + name + "' (expected A or B)");
}

}  // namespace dialect

namespace dialect::corpus {

namespace {

// Length in bytes of the UTF-8 sequence starting with `lead`, or 1 for an
// invalid lead byte.
std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::uint32_t decode_code_point(std::string_view s) {
  const auto b0 = static_cast<unsigned char>(s[0]);
  switch (s.size()) {
    case 2:
      return ((b0 & 0x1Fu) << 6) | (static_cast<unsigned char>(s[1]) & 0x3Fu);
    case 3:
      return ((b0 & 0x0Fu) << 12) | ((static_cast<unsigned char>(s[1]) & 0x3Fu) << 6) |
             (static_cast<unsigned char>(s[2]) & 0x3Fu);
    case 4:
      return ((b0 & 0x07u) << 18) | ((static_cast<unsigned char>(s[1]) & 0x3Fu) << 12) |
             ((static_cast<unsigned char>(s[2]) & 0x3Fu) << 6) |
             (static_cast<unsigned char>(s[3]) & 0x3Fu);
    default:
      return b0;
  }
}

bool is_space(std::uint32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

// Splits text into code point substrings.
std::vector<std::string_view> code_points(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    if (i + len > text.size()) len = 1;
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

const std::vector<std::string> kSpecialTokens = {"<pad>", "<s>", "</s>", "<unk>", "<blank>"};

}  // namespace

TokenizeMode parse_mode(const std::string& name) {
  if (name == "char") return TokenizeMode::Char;
  if (name == "whitespace") return TokenizeMode::Whitespace;
  throw ConfigError("unknown tokenize mode '" + name + "' (expected char or whitespace)");
}

Tokens tokenize(std::string_view text, TokenizeMode mode) {
  Tokens out;
  std::string current;
  for (auto cp : code_points(text)) {
    const bool space = is_space(decode_code_point(cp));
    if (mode == TokenizeMode::Char) {
      if (!space) out.emplace_back(cp);
      continue;
    }
    if (space) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.append(cp);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string detokenize(std::span<const std::string> tokens, TokenizeMode mode) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mode == TokenizeMode::Whitespace && i > 0) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---- Vocab ----------------------------------------------------------------

const std::vector<std::string>& Vocab::special_tokens() { return kSpecialTokens; }

Vocab::Vocab() {
  for (const auto& s : kSpecialTokens) {
    id_of_.emplace(s, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(s);
    freq_.push_back(0);
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(const std::string& token) const {
  auto it = id_of_.find(token);
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(find(t).value_or(kUnk));
  return ids;
}

Tokens Vocab::decode(std::span<const TokenId> ids) const {
  Tokens out;
  for (auto id : ids)
    if (!is_special(id)) out.push_back(token(id));
  return out;
}

TokenId Vocab::add(const std::string& token, std::uint64_t freq) {
  if (id_of_.count(token)) throw VocabError("duplicate vocabulary token '" + token + "'");
  const auto id = static_cast<TokenId>(tokens_.size());
  id_of_.emplace(token, id);
  tokens_.push_back(token);
  freq_.push_back(freq);
  return id;
}

void Vocab::write(std::ostream& os) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << freq_[i] << '\n';
}

Vocab Vocab::read(std::istream& is) {
  Vocab vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos)
      throw VocabError("vocab line " + std::to_string(line_no + 1) + " has no tab separator");
    const std::string token = line.substr(0, tab);
    std::uint64_t freq = 0;
    try {
      freq = std::stoull(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw VocabError("vocab line " + std::to_string(line_no + 1) + " has a malformed count");
    }
    if (line_no < kNumSpecials) {
      if (token != kSpecialTokens[line_no])
        throw VocabError("vocab line " + std::to_string(line_no + 1) + " must be special token " +
                         kSpecialTokens[line_no]);
      vocab.freq_[line_no] = freq;
    } else {
      vocab.add(token, freq);
    }
    ++line_no;
  }
  if (line_no < kNumSpecials) throw VocabError("vocab file is missing special tokens");
  return vocab;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write vocab file " + path.string());
  write(os);
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read vocab file " + path.string());
  return read(is);
}

// ---- building & filtering --------------------------------------------------

FreqTable count_tokens(const TokenizedCorpus& corpus) {
  FreqTable freq;
  for (const auto& sentence : corpus)
    for (const auto& t : sentence) ++freq[t];
  return freq;
}

namespace {

// Tokens ordered by descending count, ties by code point (byte) order.
std::vector<std::pair<std::string, std::uint64_t>> ranked(const FreqTable& freq) {
  std::vector<std::pair<std::string, std::uint64_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  return items;
}

}  // namespace

Vocab build_joint_vocab(std::span<const TokenizedCorpus> corpora, std::uint64_t min_freq) {
  if (min_freq < 1) throw ConfigError("min_freq must be at least 1");
  FreqTable pooled;
  for (const auto& c : corpora)
    for (const auto& sentence : c)
      for (const auto& t : sentence) ++pooled[t];
  Vocab vocab;
  for (const auto& [token, count] : ranked(pooled)) {
    if (count < min_freq) continue;
    if (vocab.find(token)) continue;  // a literal special-token string in the text
    vocab.add(token, count);
  }
  return vocab;
}

Corpus filter_corpus(const TokenizedCorpus& corpus, const Vocab& vocab, Dialect dialect,
                     std::size_t min_len, std::size_t max_len) {
  Corpus out{dialect, {}};
  for (const auto& sentence : corpus) {
    if (sentence.size() < min_len || sentence.size() > max_len) continue;
    Sentence s{{}, dialect};
    bool known = true;
    for (const auto& t : sentence) {
      auto id = vocab.find(t);
      if (!id || is_special(*id)) {
        known = false;
        break;
      }
      s.ids.push_back(*id);
    }
    if (known) out.sentences.push_back(std::move(s));
  }
  return out;
}

// ---- rank statistics -------------------------------------------------------

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return values[i] > values[j]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

SpearmanResult spearman_rank_correlation(const FreqTable& a, const FreqTable& b,
                                         std::optional<std::size_t> top_k,
                                         std::size_t permutations, std::uint64_t seed) {
  std::vector<std::string> shared;
  for (const auto& [token, count] : ranked(a))
    if (b.count(token)) shared.push_back(token);
  if (top_k && shared.size() > *top_k) shared.resize(*top_k);
  if (shared.size() < 3)
    throw InsufficientDataError("spearman: need at least 3 shared tokens, have " +
                                std::to_string(shared.size()));
  std::vector<double> fa, fb;
  for (const auto& t : shared) {
    fa.push_back(static_cast<double>(a.at(t)));
    fb.push_back(static_cast<double>(b.at(t)));
  }
  const auto ra = average_ranks(fa);
  auto rb = average_ranks(fb);
  SpearmanResult result;
  result.n = shared.size();
  result.rho = pearson(ra, rb);
  if (permutations > 0) {
    Rng rng(seed);
    std::size_t extreme = 0;
    for (std::size_t p = 0; p < permutations; ++p) {
      for (std::size_t i = rb.size(); i > 1; --i) std::swap(rb[i - 1], rb[rng.below(i)]);
      if (std::abs(pearson(ra, rb)) >= std::abs(result.rho) - 1e-12) ++extreme;
    }
    result.p_value =
        static_cast<double>(extreme + 1) / static_cast<double>(permutations + 1);
  }
  return result;
}

std::pair<CorpusStats, CorpusStats> corpus_stats(const TokenizedCorpus& a,
                                                 const TokenizedCorpus& b, std::size_t top_k) {
  const auto fa = count_tokens(a);
  const auto fb = count_tokens(b);
  auto top = [top_k](const FreqTable& f) {
    std::set<std::string> s;
    for (const auto& [token, count] : ranked(f)) {
      if (s.size() == top_k) break;
      s.insert(token);
    }
    return s;
  };
  const auto ta = top(fa), tb = top(fb);
  std::size_t overlap = 0;
  for (const auto& t : ta) overlap += tb.count(t);

  auto one = [&](const TokenizedCorpus& c, const FreqTable& self, const FreqTable& other) {
    CorpusStats s;
    s.sentence_count = c.size();
    s.vocab_size = self.size();
    for (const auto& [token, count] : self) s.unique_token_count += other.count(token) ? 0 : 1;
    s.top_k_overlap = overlap;
    return s;
  };
  return {one(a, fa, fb), one(b, fb, fa)};
}

std::string stats_to_json(const CorpusStats& stats) {
  nlohmann::json j{{"sentence_count", stats.sentence_count},
                   {"vocab_size", stats.vocab_size},
                   {"unique_token_count", stats.unique_token_count},
                   {"top_k_overlap", stats.top_k_overlap}};
  return j.dump();
}

// ---- files ----------------------------------------------------------------

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) os << l << '\n';
}

TokenizedCorpus tokenize_lines(std::span<const std::string> lines, TokenizeMode mode) {
  TokenizedCorpus out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(tokenize(l, mode));
  return out;
}

Corpus encode_corpus(const TokenizedCorpus& corpus, const Vocab& vocab, Dialect dialect) {
  Corpus out{dialect, {}};
  out.sentences.reserve(corpus.size());
  for (const auto& s : corpus) out.sentences.push_back(Sentence{vocab.encode(s), dialect});
  return out;
}

std::vector<std::string> decode_corpus(std::span<const Sentence> sentences, const Vocab& vocab,
                                       TokenizeMode mode) {
  std::vector<std::string> lines;
  lines.reserve(sentences.size());
  for (const auto& s : sentences) {
    const auto tokens = vocab.decode(s.ids);
    lines.push_back(detokenize(tokens, mode));
  }
  return lines;
}

}  // namespace dialect::corpus
