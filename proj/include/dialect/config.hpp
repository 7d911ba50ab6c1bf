// JSON run configuration covering every model, noise, training, decoding,
// data and synthetic-corpus setting. Unknown keys are rejected.
#pragma once

#include <filesystem>
#include <string>

#include "dialect/decode.hpp"
#include "dialect/model.hpp"
#include "dialect/noise.hpp"
#include "dialect/synth.hpp"
#include "dialect/training.hpp"
#include "json.hpp"

namespace dialect::config {

using Json = nlohmann::ordered_json;

struct DataConfig {
  std::string tokenize = "char";
  std::uint64_t min_freq = 1;
  std::size_t min_len = 4;
  std::size_t max_len = 32;

  void validate() const;
};

struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  decode::BeamConfig decode;
  DataConfig data;
  synth::SynthConfig synth;

  void validate() const;  // model.vocab_size may still be 0
};

Json to_json(const model::ModelConfig& c);
Json to_json(const noise::NoiseConfig& c);
Json to_json(const train::TrainConfig& c);
Json to_json(const decode::BeamConfig& c);
Json to_json(const DataConfig& c);
Json to_json(const synth::SynthConfig& c);
Json to_json(const RunConfig& c);

// Missing keys keep their defaults.
model::ModelConfig model_from_json(const Json& j);
noise::NoiseConfig noise_from_json(const Json& j);
train::TrainConfig train_from_json(const Json& j);
decode::BeamConfig beam_from_json(const Json& j);
DataConfig data_from_json(const Json& j);
synth::SynthConfig synth_from_json(const Json& j);
RunConfig run_from_json(const Json& j);

/// Throws ConfigError on unreadable files, malformed JSON or invalid values.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dialect::config
