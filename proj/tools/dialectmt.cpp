// dialectmt: synthetic data generation, corpus statistics, training,
// translation and evaluation.
#include <fcntl.h>
#include <unistd.h>

#include <Eigen/Core>
#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dialect/config.hpp"
#include "dialect/corpus.hpp"
#include "dialect/decode.hpp"
#include "dialect/model.hpp"
#include "dialect/pipeline.hpp"
#include "dialect/synth.hpp"
#include "dialect/training.hpp"

#ifndef DIALECTMT_VERSION
#define DIALECTMT_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace dialect;
using config::Json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Manifest {
  std::string command;
  Json config = Json::object();
  std::optional<std::uint64_t> seed;
  Json inputs = Json::object();
  Json outputs = Json::object();
  Json results = Json::object();
  std::string started = utc_now();

  void write(const fs::path& path) const {
    Json j{{"command", command},
           {"config", config},
           {"seed", seed ? Json(*seed) : Json(nullptr)},
           {"inputs", inputs},
           {"outputs", outputs},
           {"results", results},
           {"tool_version", DIALECTMT_VERSION},
           {"started_at", started},
           {"finished_at", utc_now()}};
    write_text(path, j.dump(2) + "\n");
  }

  static void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
  }
};

// Exclusive lock on a training directory, released on destruction.
class DirLock {
 public:
  explicit DirLock(fs::path path) : path_(std::move(path)) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw std::runtime_error(path_.string() + " exists: another training run holds " +
                                 path_.parent_path().string());
      throw std::runtime_error("cannot create " + path_.string() + ": " + std::strerror(errno));
    }
    const auto pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {
    }
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void apply_thread_env() {
  const char* v = std::getenv("DIALECTMT_THREADS");
  if (!v || !*v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("DIALECTMT_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
}

corpus::TokenizedCorpus read_tokenized(const fs::path& path, corpus::TokenizeMode mode) {
  const auto lines = corpus::read_lines(path);
  return corpus::tokenize_lines(lines, mode);
}

corpus::TokenizedCorpus length_filter(const corpus::TokenizedCorpus& c, std::size_t lo,
                                      std::size_t hi) {
  corpus::TokenizedCorpus out;
  for (const auto& s : c)
    if (s.size() >= lo && s.size() <= hi) out.push_back(s);
  return out;
}

Json spearman_json(const corpus::SpearmanResult& r) {
  return Json{{"rho", r.rho}, {"p_value", r.p_value}, {"n", r.n}};
}

Json stats_json(const corpus::TokenizedCorpus& a, const corpus::TokenizedCorpus& b,
                std::size_t top_k) {
  const auto [sa, sb] = corpus::corpus_stats(a, b, top_k);
  const auto fa = corpus::count_tokens(a), fb = corpus::count_tokens(b);
  return Json{{"top_k", top_k},
              {"A", Json::parse(corpus::stats_to_json(sa))},
              {"B", Json::parse(corpus::stats_to_json(sb))},
              {"spearman_full", spearman_json(corpus::spearman_rank_correlation(fa, fb))},
              {"spearman_top_k", spearman_json(corpus::spearman_rank_correlation(fa, fb, top_k))}};
}

struct DataOpts {
  std::string tokenize = "char";
  std::size_t min_len = 4;
  std::size_t max_len = 32;
  std::uint64_t min_freq = 1;
  std::size_t top_k = 250;
};

void add_data_opts(CLI::App* app, DataOpts& o) {
  app->add_option("--tokenize", o.tokenize, "char or whitespace")
      ->check(CLI::IsMember({"char", "whitespace"}))
      ->capture_default_str();
  app->add_option("--min-len", o.min_len, "shortest kept sentence")->capture_default_str();
  app->add_option("--max-len", o.max_len, "longest kept sentence")->capture_default_str();
  app->add_option("--top-k", o.top_k, "tokens in the top-k Spearman")->capture_default_str();
}

// ---- gen-synth --------------------------------------------------------------

struct GenSynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_synth(const GenSynthArgs& args) {
  auto cfg = config::load_run_config(args.config);
  if (args.seed) cfg.synth.seed = *args.seed;
  cfg.synth.validate();
  Manifest m;
  m.command = "gen-synth";
  m.config = Json{{"synth", config::to_json(cfg.synth)}};
  m.seed = cfg.synth.seed;
  m.inputs["config"] = args.config;
  const auto data = synth::generate_synthetic_pair(cfg.synth);
  fs::create_directories(args.out);
  synth::write_synth_data(data, cfg.synth, args.out);
  for (const char* f : {"train.A", "train.B", "dev.A", "dev.B", "test.A", "test.B", "rules.tsv",
                        "synth.json"})
    m.outputs[f] = (fs::path(args.out) / f).string();
  m.results = Json{{"full_spearman", data.stats.full_spearman},
                   {"top_spearman", data.stats.top_spearman},
                   {"unique_A", data.stats.unique_a},
                   {"unique_B", data.stats.unique_b},
                   {"rules", data.rules.size()}};
  m.write(fs::path(args.out) / "manifest.json");
  std::cout << m.results.dump() << "\n";
  return 0;
}

// ---- prep / stats -------------------------------------------------------------

struct PrepArgs {
  std::string a, b, out;
  DataOpts data;
};

int cmd_prep(const PrepArgs& args) {
  const auto mode = corpus::parse_mode(args.data.tokenize);
  const auto ta = length_filter(read_tokenized(args.a, mode), args.data.min_len, args.data.max_len);
  const auto tb = length_filter(read_tokenized(args.b, mode), args.data.min_len, args.data.max_len);
  const std::vector<corpus::TokenizedCorpus> both{ta, tb};
  const auto vocab = corpus::build_joint_vocab(both, args.data.min_freq);
  const auto stats = stats_json(ta, tb, args.data.top_k);

  fs::create_directories(args.out);
  const fs::path out(args.out);
  vocab.save(out / "vocab.tsv");
  Manifest::write_text(out / "stats.json", stats.dump(2) + "\n");
  Manifest m;
  m.command = "prep";
  m.config = Json{{"tokenize", args.data.tokenize},
                  {"min_len", args.data.min_len},
                  {"max_len", args.data.max_len},
                  {"min_freq", args.data.min_freq},
                  {"top_k", args.data.top_k}};
  m.inputs = Json{{"A", args.a}, {"B", args.b}};
  m.outputs = Json{{"vocab", (out / "vocab.tsv").string()}, {"stats", (out / "stats.json").string()}};
  m.results = Json{{"vocab_size", vocab.size()}};
  m.write(out / "manifest.json");
  std::cout << stats.dump() << "\n";
  return 0;
}

struct StatsArgs {
  std::string a, b, output;
  DataOpts data;
};

int cmd_stats(const StatsArgs& args) {
  const auto mode = corpus::parse_mode(args.data.tokenize);
  const auto ta = length_filter(read_tokenized(args.a, mode), args.data.min_len, args.data.max_len);
  const auto tb = length_filter(read_tokenized(args.b, mode), args.data.min_len, args.data.max_len);
  const auto stats = stats_json(ta, tb, args.data.top_k);
  std::cout << stats.dump(2) << "\n";
  if (!args.output.empty()) {
    Manifest::write_text(args.output, stats.dump(2) + "\n");
    Manifest m;
    m.command = "stats";
    m.config = Json{{"tokenize", args.data.tokenize},
                    {"min_len", args.data.min_len},
                    {"max_len", args.data.max_len},
                    {"top_k", args.data.top_k}};
    m.inputs = Json{{"A", args.a}, {"B", args.b}};
    m.outputs = Json{{"stats", args.output}};
    m.write(args.output + ".manifest.json");
  }
  return 0;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  bool no_pivot_private = false;
  bool no_layer_coordination = false;
  bool resume = false;
  bool quiet = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stop_at;
};

Json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return Json::parse(is);
}

double test_bleu(const model::Transformer<float>& model, const std::vector<Sentence>& src,
                 const std::vector<Sentence>& ref, Dialect to, const decode::BeamConfig& cfg) {
  const auto hyp = decode::translate_corpus(model, src, to, cfg);
  return decode::bleu(hyp, ref).score;
}

int cmd_train(const TrainArgs& args) {
  auto cfg = config::load_run_config(args.config);
  if (args.no_pivot_private) cfg.model.pivot_dim = 0;
  if (args.no_layer_coordination) cfg.model.layer_coordination = false;
  if (args.seed) cfg.train.seed = *args.seed;

  const fs::path out(args.out);
  const auto data = pipeline::prepare_dir(args.data, cfg.data);
  cfg.model.vocab_size = data.vocab.size();
  cfg.validate();
  cfg.model.validate();

  fs::create_directories(out);
  DirLock lock(out / "train.lock");

  const Json resolved = config::to_json(cfg);
  std::optional<model::ParameterStore<float>> init;
  std::optional<fs::path> resume_state;
  if (args.resume) {
    if (!fs::exists(out / "last.state") || !fs::exists(out / "last.ckpt"))
      throw UsageError("--resume: no last.ckpt/last.state in " + out.string());
    if (read_json(out / "config.json") != resolved)
      throw ConfigError("--resume: configuration differs from " + (out / "config.json").string());
    if (!(corpus::Vocab::load(out / "vocab.tsv") == data.vocab))
      throw ConfigError("--resume: vocabulary differs from " + (out / "vocab.tsv").string());
    init = model::load_checkpoint(out / "last.ckpt", cfg.model).first;
    resume_state = out / "last.state";
  } else {
    if (fs::exists(out / "metrics.jsonl"))
      throw UsageError(out.string() + " already holds a run; pass --resume to continue it");
    data.vocab.save(out / "vocab.tsv");
    Manifest::write_text(out / "config.json", resolved.dump(2) + "\n");
  }

  Manifest m;
  m.command = "train";
  m.config = resolved;
  m.seed = cfg.train.seed;
  m.inputs = Json{{"config", args.config}, {"data", args.data}, {"resume", args.resume}};

  std::optional<train::DevSet> dev;
  if (!data.dev.a.empty()) dev = data.dev;
  train::Trainer trainer(cfg.model, cfg.train, data.train_a, data.train_b, dev, std::move(init));
  train::RunOptions ro;
  ro.out_dir = out;
  ro.resume_state = resume_state;
  ro.stop_at = args.stop_at.value_or(0);
  ro.quiet = args.quiet;
  if (!args.quiet)
    ro.on_record = [](const train::MetricsRecord& r) {
      if (r.dev_bleu_ab)
        std::cerr << "step " << r.step + 1 << " loss " << r.loss_total << " dev BLEU A->B "
                  << *r.dev_bleu_ab << " B->A " << *r.dev_bleu_ba << "\n";
    };
  const auto result = train::run_training(trainer, ro);

  m.outputs = Json{{"metrics", (out / "metrics.jsonl").string()},
                   {"config", (out / "config.json").string()},
                   {"vocab", (out / "vocab.tsv").string()},
                   {"last_checkpoint", (out / "last.ckpt").string()},
                   {"last_state", (out / "last.state").string()}};
  m.results = Json{{"steps", trainer.current_step()},
                   {"best_dev_bleu", result.best_dev_bleu},
                   {"best_step", result.best_step},
                   {"early_stopped", result.early_stopped}};
  if (fs::exists(out / "best.ckpt")) {
    m.outputs["best_checkpoint"] = (out / "best.ckpt").string();
    if (!data.test.a.empty() && trainer.current_step() == cfg.train.total_steps) {
      auto [store, mc] = model::load_checkpoint(out / "best.ckpt", cfg.model);
      model::Transformer<float> best(mc, std::move(store));
      m.results["test_bleu_AB"] = test_bleu(best, data.test.a, data.test.b, Dialect::B, cfg.decode);
      m.results["test_bleu_BA"] = test_bleu(best, data.test.b, data.test.a, Dialect::A, cfg.decode);
    }
  }
  m.write(out / "manifest.json");
  std::cout << m.results.dump() << "\n";
  return 0;
}

// ---- translate / eval ------------------------------------------------------------

struct DecodeArgs {
  std::string checkpoint, vocab, baseline, input, output, reference, hypotheses;
  std::string to = "B";
  std::string tokenize = "char";
  std::size_t beam = 1;
  std::size_t max_len = 32;
  double alpha = 0.6;
};

void add_decode_opts(CLI::App* app, DecodeArgs& a) {
  app->add_option("--checkpoint", a.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  app->add_option("--vocab", a.vocab, "vocabulary (default: vocab.tsv next to the checkpoint)")
      ->check(CLI::ExistingFile);
  app->add_option("--baseline", a.baseline, "rule table; translate by token substitution")
      ->check(CLI::ExistingFile);
  app->add_option("--to", a.to, "target dialect")->check(CLI::IsMember({"A", "B"}))->capture_default_str();
  app->add_option("--tokenize", a.tokenize, "char or whitespace")
      ->check(CLI::IsMember({"char", "whitespace"}))
      ->capture_default_str();
  app->add_option("--beam", a.beam, "beam size; 1 decodes greedily")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_option("--max-len", a.max_len, "longest output")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--alpha", a.alpha, "length penalty exponent")->capture_default_str();
}

std::vector<std::string> translate_lines(const DecodeArgs& a, const std::vector<std::string>& lines,
                                         Json& config_out) {
  const auto mode = corpus::parse_mode(a.tokenize);
  const Dialect to = parse_dialect(a.to);
  const auto tokens = corpus::tokenize_lines(lines, mode);
  std::vector<std::string> out;
  if (!a.baseline.empty()) {
    if (!a.checkpoint.empty()) throw UsageError("--baseline and --checkpoint are exclusive");
    auto rules = synth::RuleTable::load(a.baseline);
    if (rules.to() != to) rules = rules.inverse();
    if (rules.to() != to) throw ConfigError(a.baseline + ": rules do not translate into " + a.to);
    for (const auto& t : tokens) out.push_back(corpus::detokenize(rules.apply(t), mode));
    config_out = Json{{"baseline", a.baseline}, {"to", a.to}, {"tokenize", a.tokenize}};
    return out;
  }
  if (a.checkpoint.empty()) throw UsageError("one of --checkpoint or --baseline is required");
  const fs::path vocab_path =
      a.vocab.empty() ? fs::path(a.checkpoint).parent_path() / "vocab.tsv" : fs::path(a.vocab);
  const auto vocab = corpus::Vocab::load(vocab_path);
  auto [store, mc] = model::load_checkpoint(a.checkpoint);
  if (mc.vocab_size != vocab.size())
    throw ConfigError(vocab_path.string() + " does not match the checkpoint vocabulary size");
  model::Transformer<float> model(mc, std::move(store));

  const Dialect from = other(to);
  std::vector<Sentence> src;
  std::size_t truncated = 0;
  for (const auto& t : tokens) {
    Sentence s{vocab.encode(t), from};
    if (s.ids.size() > mc.max_len) {
      s.ids.resize(mc.max_len);
      ++truncated;
    }
    src.push_back(std::move(s));
  }
  if (truncated) std::cerr << "warning: " << truncated << " inputs truncated to " << mc.max_len << " tokens\n";

  decode::BeamConfig bc;
  bc.beam_size = a.beam;
  bc.max_len = a.max_len;
  bc.length_penalty_alpha = a.alpha;
  std::vector<std::size_t> nonempty;
  std::vector<Sentence> batch;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (!src[i].ids.empty()) {
      nonempty.push_back(i);
      batch.push_back(src[i]);
    }
  const auto hyp = decode::translate_corpus(model, batch, to, bc);
  std::vector<Sentence> all(src.size(), Sentence{{}, to});
  for (std::size_t k = 0; k < nonempty.size(); ++k) all[nonempty[k]] = hyp[k];
  out = corpus::decode_corpus(all, vocab, mode);
  config_out = Json{{"checkpoint", a.checkpoint},
                    {"vocab", vocab_path.string()},
                    {"model", config::to_json(mc)},
                    {"decode", config::to_json(bc)},
                    {"to", a.to},
                    {"tokenize", a.tokenize}};
  return out;
}

int cmd_translate(const DecodeArgs& a) {
  const auto lines = corpus::read_lines(a.input);
  Manifest m;
  m.command = "translate";
  const auto out = translate_lines(a, lines, m.config);
  corpus::write_lines(a.output, out);
  m.inputs["input"] = a.input;
  m.outputs["output"] = a.output;
  m.results["sentences"] = out.size();
  m.write(a.output + ".manifest.json");
  return 0;
}

std::vector<std::vector<TokenId>> index_tokens(const corpus::TokenizedCorpus& c,
                                               std::map<std::string, TokenId>& ids) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& s : c) {
    auto& row = out.emplace_back();
    for (const auto& t : s) row.push_back(ids.emplace(t, static_cast<TokenId>(ids.size())).first->second);
  }
  return out;
}

int cmd_eval(const DecodeArgs& a) {
  const auto mode = corpus::parse_mode(a.tokenize);
  const auto refs = corpus::read_lines(a.reference);
  Manifest m;
  m.command = "eval";
  m.inputs["reference"] = a.reference;
  std::vector<std::string> hyps;
  if (!a.hypotheses.empty()) {
    if (!a.input.empty() || !a.checkpoint.empty() || !a.baseline.empty())
      throw UsageError("--hyp excludes --input, --checkpoint and --baseline");
    hyps = corpus::read_lines(a.hypotheses);
    m.inputs["hypotheses"] = a.hypotheses;
    m.config = Json{{"tokenize", a.tokenize}};
  } else {
    if (a.input.empty()) throw UsageError("eval needs --hyp or --input");
    hyps = translate_lines(a, corpus::read_lines(a.input), m.config);
    m.inputs["input"] = a.input;
  }
  if (hyps.size() != refs.size())
    throw UsageError("hypotheses and references differ in line count (" +
                     std::to_string(hyps.size()) + " vs " + std::to_string(refs.size()) + ")");
  std::map<std::string, TokenId> ids;
  const auto h = index_tokens(corpus::tokenize_lines(hyps, mode), ids);
  const auto r = index_tokens(corpus::tokenize_lines(refs, mode), ids);
  const auto report = decode::bleu(h, r);
  const auto text = decode::bleu_to_json(report);
  std::cout << text << "\n";
  if (!a.output.empty()) {
    Manifest::write_text(a.output, text + "\n");
    m.outputs["report"] = a.output;
    m.results = Json::parse(text);
    m.write(a.output + ".manifest.json");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised dialect translation toolkit"};
  app.set_version_flag("--version", DIALECTMT_VERSION);
  app.require_subcommand(1);

  GenSynthArgs gen;
  auto* c_gen = app.add_subcommand("gen-synth", "generate a synthetic dialect pair");
  c_gen->add_option("--config", gen.config, "run configuration JSON")->required()->check(CLI::ExistingFile);
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--seed", gen.seed, "override synth.seed");

  PrepArgs prep;
  auto* c_prep = app.add_subcommand("prep", "build the joint vocabulary and corpus statistics");
  c_prep->add_option("--a", prep.a, "dialect A corpus")->required()->check(CLI::ExistingFile);
  c_prep->add_option("--b", prep.b, "dialect B corpus")->required()->check(CLI::ExistingFile);
  c_prep->add_option("--out", prep.out, "output directory")->required();
  c_prep->add_option("--min-freq", prep.data.min_freq, "minimum token count")->capture_default_str();
  add_data_opts(c_prep, prep.data);

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "corpus statistics and rank correlations");
  c_stats->add_option("--a", stats.a, "dialect A corpus")->required()->check(CLI::ExistingFile);
  c_stats->add_option("--b", stats.b, "dialect B corpus")->required()->check(CLI::ExistingFile);
  c_stats->add_option("--output", stats.output, "also write the JSON here");
  add_data_opts(c_stats, stats.data);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "unsupervised training");
  c_train->add_option("--config", tr.config, "run configuration JSON")->required()->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "directory with train/dev/test .A/.B files")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_train->add_option("--out", tr.out, "run directory")->required();
  c_train->add_flag("--no-pivot-private", tr.no_pivot_private, "pivot_dim = 0");
  c_train->add_flag("--no-layer-coordination", tr.no_layer_coordination,
                    "every decoder layer attends to the top encoder layer");
  c_train->add_flag("--resume", tr.resume, "continue from last.ckpt/last.state in --out");
  c_train->add_option("--seed", tr.seed, "override train.seed");
  c_train->add_option("--stop-at", tr.stop_at, "stop after this many total steps")->check(CLI::PositiveNumber);
  c_train->add_flag("--quiet", tr.quiet, "no progress output");

  DecodeArgs trans;
  auto* c_trans = app.add_subcommand("translate", "translate a text file");
  c_trans->add_option("--input", trans.input, "source text")->required()->check(CLI::ExistingFile);
  c_trans->add_option("--output", trans.output, "translations")->required();
  add_decode_opts(c_trans, trans);

  DecodeArgs ev;
  auto* c_eval = app.add_subcommand("eval", "corpus BLEU against a reference");
  c_eval->add_option("--ref", ev.reference, "reference text")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--hyp", ev.hypotheses, "hypothesis text")->check(CLI::ExistingFile);
  c_eval->add_option("--input", ev.input, "source text to translate first")->check(CLI::ExistingFile);
  c_eval->add_option("--output", ev.output, "write the BLEU report here");
  add_decode_opts(c_eval, ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    apply_thread_env();
    if (*c_gen) return cmd_gen_synth(gen);
    if (*c_prep) return cmd_prep(prep);
    if (*c_stats) return cmd_stats(stats);
    if (*c_train) return cmd_train(tr);
    if (*c_trans) return cmd_translate(trans);
    if (*c_eval) return cmd_eval(ev);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
