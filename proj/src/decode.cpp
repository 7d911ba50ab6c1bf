#include "dialect/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "json.hpp"

namespace dialect::decode {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool allowed(TokenId tok, std::size_t produced, std::size_t min_len) {
  if (tok == kEos) return produced >= min_len;
  return !is_special(tok);
}

}  // namespace

void BeamConfig::validate() const {
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_len == 0) throw ConfigError("decode max_len must be positive");
  if (!(length_penalty_alpha >= 0.0)) throw ConfigError("length_penalty_alpha must be >= 0");
}

double length_penalty(std::size_t length, double alpha) {
  if (alpha == 0.0) return 1.0;
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

template <typename T>
ModelScorer<T>::ModelScorer(const model::Transformer<T>& model, std::span<const Sentence> sources,
                            Dialect target_dialect)
    : decoder_(model, sources, target_dialect), vocab_(model.config().vocab_size) {}

template <typename T>
std::vector<double> ModelScorer<T>::step(std::span<const TokenId> previous) {
  auto logits = decoder_.step(previous);
  const auto x = logits.data();
  const std::size_t rows = logits.dim(0);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const auto* row = x.data() + r * vocab_;
    double mx = kNegInf;
    for (std::size_t v = 0; v < vocab_; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    double z = 0.0;
    for (std::size_t v = 0; v < vocab_; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t v = 0; v < vocab_; ++v)
      out[r * vocab_ + v] = static_cast<double>(row[v]) - log_z;
  }
  return out;
}

std::vector<std::vector<TokenId>> greedy_search(StepScorer& scorer, std::size_t max_len,
                                                std::size_t min_len,
                                                std::span<const std::size_t> row_max_len) {
  if (!row_max_len.empty() && row_max_len.size() != scorer.rows())
    throw std::invalid_argument("greedy_search: one length cap per row expected");
  const std::size_t V = scorer.vocab_size();
  std::vector<std::vector<TokenId>> out(scorer.rows());
  // active[i] is the output row that scorer row i decodes
  std::vector<std::size_t> active(out.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  std::vector<TokenId> previous(active.size(), kBos);

  for (std::size_t t = 0; t < max_len && !active.empty(); ++t) {
    const auto lp = scorer.step(previous);
    std::vector<std::size_t> keep;
    std::vector<TokenId> next;
    for (std::size_t i = 0; i < active.size(); ++i) {
      TokenId best = -1;
      double best_lp = kNegInf;
      for (std::size_t v = 0; v < V; ++v) {
        const auto tok = static_cast<TokenId>(v);
        if (!allowed(tok, t, min_len)) continue;
        if (best < 0 || lp[i * V + v] > best_lp) {
          best = tok;
          best_lp = lp[i * V + v];
        }
      }
      if (best == kEos) continue;
      out[active[i]].push_back(best);
      if (!row_max_len.empty() && out[active[i]].size() >= row_max_len[active[i]]) continue;
      keep.push_back(i);
      next.push_back(best);
    }
    if (keep.size() != active.size() && !keep.empty()) {
      scorer.reorder(keep);
      std::vector<std::size_t> remaining;
      for (auto i : keep) remaining.push_back(active[i]);
      active = std::move(remaining);
    } else if (keep.empty()) {
      active.clear();
    }
    previous = std::move(next);
  }
  return out;
}

Hypothesis beam_search(StepScorer& scorer, const BeamConfig& cfg, std::size_t min_len) {
  cfg.validate();
  if (scorer.rows() != 1) throw std::invalid_argument("beam_search expects a single source row");
  const std::size_t V = scorer.vocab_size(), k = cfg.beam_size;
  const double alpha = cfg.length_penalty_alpha;
  auto normalized = [&](const Hypothesis& h) {
    return h.log_prob / length_penalty(h.ids.size() + (h.finished ? 1 : 0), alpha);
  };

  std::vector<Hypothesis> live(1), finished;
  std::vector<TokenId> previous{kBos};
  struct Candidate {
    double score;
    std::size_t hyp;
    TokenId tok;
  };

  for (std::size_t t = 0; t < cfg.max_len; ++t) {
    const auto lp = scorer.step(previous);
    std::vector<Candidate> cands;
    cands.reserve(live.size() * V);
    for (std::size_t h = 0; h < live.size(); ++h)
      for (std::size_t v = 0; v < V; ++v) {
        const auto tok = static_cast<TokenId>(v);
        if (allowed(tok, t, min_len) && lp[h * V + v] > kNegInf)
          cands.push_back({live[h].log_prob + lp[h * V + v], h, tok});
      }
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.tok < b.tok;
    });

    std::vector<Hypothesis> next;
    std::vector<std::size_t> rows;
    previous.clear();
    for (const auto& c : cands) {
      if (next.size() == k) break;
      Hypothesis h{live[c.hyp].ids, c.score, false};
      if (c.tok == kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
        continue;
      }
      h.ids.push_back(c.tok);
      next.push_back(std::move(h));
      rows.push_back(c.hyp);
      previous.push_back(c.tok);
    }
    live = std::move(next);
    if (live.empty() || finished.size() >= k) break;

    double best_finished = kNegInf;
    for (const auto& f : finished) best_finished = std::max(best_finished, normalized(f));
    double best_live = kNegInf;
    for (const auto& h : live) best_live = std::max(best_live, h.log_prob);
    if (best_finished >= best_live / length_penalty(cfg.max_len + 1, alpha)) break;
    if (t + 1 < cfg.max_len) scorer.reorder(rows);
  }

  const auto& pool = finished.empty() ? live : finished;
  const Hypothesis* best = nullptr;
  for (const auto& h : pool)
    if (best == nullptr || normalized(h) > normalized(*best)) best = &h;
  return best ? *best : Hypothesis{};
}

template <typename T>
std::vector<Sentence> greedy_decode(const model::Transformer<T>& model,
                                    std::span<const Sentence> sources, Dialect target_dialect,
                                    std::size_t max_len, std::size_t min_len,
                                    std::span<const std::size_t> row_max_len) {
  if (sources.empty()) return {};
  ModelScorer<T> scorer(model, sources, target_dialect);
  auto ids = greedy_search(scorer, max_len, min_len, row_max_len);
  std::vector<Sentence> out;
  out.reserve(ids.size());
  for (auto& s : ids) out.push_back(Sentence{std::move(s), target_dialect});
  return out;
}

template <typename T>
Sentence greedy_decode(const model::Transformer<T>& model, const Sentence& source,
                       Dialect target_dialect, std::size_t max_len) {
  const Sentence s[1] = {source};
  return greedy_decode(model, std::span<const Sentence>(s), target_dialect, max_len).front();
}

template <typename T>
Sentence beam_decode(const model::Transformer<T>& model, const Sentence& source,
                     Dialect target_dialect, const BeamConfig& cfg) {
  const Sentence s[1] = {source};
  ModelScorer<T> scorer(model, s, target_dialect);
  return Sentence{beam_search(scorer, cfg).ids, target_dialect};
}

template <typename T>
std::vector<Sentence> translate_corpus(const model::Transformer<T>& model,
                                       std::span<const Sentence> sources, Dialect target_dialect,
                                       const BeamConfig& cfg, std::size_t batch) {
  cfg.validate();
  std::vector<Sentence> out;
  out.reserve(sources.size());
  if (cfg.beam_size == 1) {
    for (std::size_t i = 0; i < sources.size(); i += batch) {
      auto chunk = sources.subspan(i, std::min(batch, sources.size() - i));
      for (auto& s : greedy_decode(model, chunk, target_dialect, cfg.max_len))
        out.push_back(std::move(s));
    }
  } else {
    for (const auto& s : sources) out.push_back(beam_decode(model, s, target_dialect, cfg));
  }
  return out;
}

// ---- BLEU -----------------------------------------------------------------

BleuReport bleu(std::span<const std::vector<TokenId>> hypotheses,
                std::span<const std::vector<TokenId>> references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) +
                                " hypotheses vs " + std::to_string(references.size()) +
                                " references");
  BleuReport r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    r.hyp_length += hyp.size();
    r.ref_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      if (hyp.size() < n) continue;
      std::map<std::vector<TokenId>, std::size_t> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= ref.size(); ++i)
        ++ref_counts[std::vector<TokenId>(ref.begin() + i, ref.begin() + i + n)];
      for (std::size_t i = 0; i + n <= hyp.size(); ++i)
        ++hyp_counts[std::vector<TokenId>(hyp.begin() + i, hyp.begin() + i + n)];
      r.totals[n - 1] += hyp.size() - n + 1;
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  bool any_zero = false;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] =
        r.totals[n] == 0 ? 0.0 : static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    if (r.matches[n] == 0) any_zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  if (r.hyp_length == 0) r.brevity_penalty = 0.0;
  else if (r.hyp_length < r.ref_length)
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length));
  else r.brevity_penalty = 1.0;
  r.score = any_zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

BleuReport bleu(std::span<const Sentence> hypotheses, std::span<const Sentence> references) {
  std::vector<std::vector<TokenId>> h, r;
  for (const auto& s : hypotheses) h.push_back(s.ids);
  for (const auto& s : references) r.push_back(s.ids);
  return bleu(std::span<const std::vector<TokenId>>(h), std::span<const std::vector<TokenId>>(r));
}

std::string bleu_to_json(const BleuReport& report) {
  nlohmann::ordered_json j;
  j["score"] = report.score;
  j["precisions"] = report.precisions;
  j["matches"] = report.matches;
  j["totals"] = report.totals;
  j["brevity_penalty"] = report.brevity_penalty;
  j["hyp_length"] = report.hyp_length;
  j["ref_length"] = report.ref_length;
  return j.dump(2);
}

template class ModelScorer<float>;
template class ModelScorer<double>;
template std::vector<Sentence> greedy_decode<float>(const model::Transformer<float>&,
                                                    std::span<const Sentence>, Dialect,
                                                    std::size_t, std::size_t,
    std::span<const std::size_t>);
template std::vector<Sentence> greedy_decode<double>(const model::Transformer<double>&,
                                                     std::span<const Sentence>, Dialect,
                                                     std::size_t, std::size_t,
    std::span<const std::size_t>);
template Sentence greedy_decode<float>(const model::Transformer<float>&, const Sentence&, Dialect,
                                       std::size_t);
template Sentence greedy_decode<double>(const model::Transformer<double>&, const Sentence&,
                                        Dialect, std::size_t);
template Sentence beam_decode<float>(const model::Transformer<float>&, const Sentence&, Dialect,
                                     const BeamConfig&);
template Sentence beam_decode<double>(const model::Transformer<double>&, const Sentence&, Dialect,
                                      const BeamConfig&);
template std::vector<Sentence> translate_corpus<float>(const model::Transformer<float>&,
                                                       std::span<const Sentence>, Dialect,
                                                       const BeamConfig&, std::size_t);
template std::vector<Sentence> translate_corpus<double>(const model::Transformer<double>&,
                                                        std::span<const Sentence>, Dialect,
                                                        const BeamConfig&, std::size_t);

}  // namespace dialect::decode
