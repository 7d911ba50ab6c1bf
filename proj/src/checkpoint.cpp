#include <bit>
#include <cstring>
#include <fstream>

#include "dialect/config.hpp"
#include "dialect/model.hpp"

namespace dialect::model {

namespace {

constexpr const char* kFormat = "dialectmt-tensors";
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

}  // namespace

void save_tensors(const std::filesystem::path& path, const std::string& manifest_extra_json,
                  const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  config::Json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["extra"] = manifest_extra_json.empty() ? config::Json::object()
                                                  : config::Json::parse(manifest_extra_json);
  auto& list = manifest["tensors"] = config::Json::array();
  for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", t.shape()}});
  const std::string header = manifest.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : tensors)
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorFile load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  const auto file_size = std::filesystem::file_size(path);
  std::uint64_t len = 0;
  if (file_size < sizeof len || !in.read(reinterpret_cast<char*>(&len), sizeof len))
    throw CheckpointError(path.string() + ": truncated header");
  if (len > file_size - sizeof len) throw CheckpointError(path.string() + ": truncated manifest");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));

  config::Json manifest;
  try {
    manifest = config::Json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed manifest: " + e.what());
  }
  if (manifest.value("format", "") != kFormat)
    throw CheckpointError(path.string() + ": not a tensor file");
  if (manifest.value("version", -1) != kVersion)
    throw CheckpointError(path.string() + ": unsupported version " +
                          manifest.value("version", config::Json()).dump());

  TensorFile out;
  out.extra_json = manifest["extra"].dump();
  std::uint64_t expected = 0;
  std::vector<std::pair<std::string, ad::Shape>> entries;
  for (const auto& e : manifest.at("tensors")) {
    auto shape = e.at("shape").get<ad::Shape>();
    expected += ad::numel(shape) * sizeof(float);
    entries.emplace_back(e.at("name").get<std::string>(), std::move(shape));
  }
  if (file_size - sizeof len - len != expected)
    throw CheckpointError(path.string() + ": blob holds " +
                          std::to_string(file_size - sizeof len - len) + " bytes, manifest needs " +
                          std::to_string(expected));
  for (auto& [name, shape] : entries) {
    std::vector<float> values(ad::numel(shape));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!in) throw CheckpointError(path.string() + ": short read");
    out.tensors.emplace_back(name, Tensor<float>(std::move(shape), std::move(values), true));
  }
  return out;
}

void save_checkpoint(const ParameterStore<float>& store, const ModelConfig& cfg,
                     const std::filesystem::path& path) {
  config::Json extra{{"kind", "model"}, {"config", config::to_json(cfg)}};
  save_tensors(path, extra.dump(), store.entries());
}

std::pair<ParameterStore<float>, ModelConfig> load_checkpoint(
    const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  auto file = load_tensors(path);
  const auto extra = config::Json::parse(file.extra_json);
  if (extra.value("kind", "") != "model") throw CheckpointError(path.string() + ": not a model");
  ModelConfig cfg;
  try {
    cfg = config::model_from_json(extra.at("config"));
    cfg.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(path.string() + ": bad embedded config: " + e.what());
  }
  const auto layout = parameter_layout(expected ? *expected : cfg);
  if (layout.size() != file.tensors.size())
    throw CheckpointError(path.string() + ": " + std::to_string(file.tensors.size()) +
                          " tensors, config requires " + std::to_string(layout.size()));
  ParameterStore<float> store;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, t] = file.tensors[i];
    if (name != layout[i].first)
      throw CheckpointError(path.string() + ": tensor " + name + " where " + layout[i].first +
                            " expected");
    if (t.shape() != layout[i].second)
      throw CheckpointError(path.string() + ": shape mismatch for " + name + ": file has " +
                            ad::shape_str(t.shape()) + ", config requires " +
                            ad::shape_str(layout[i].second));
    store.add(name, t);
  }
  return {std::move(store), cfg};
}

}  // namespace dialect::model
