#pragma once

// Checkpoint file:
//   "3MCK" | u64 LE header length | JSON header | f64 LE parameter blobs
// The header holds the model config, an optional free-form "meta" object and
// the parameter table {name, shape, offset} with offsets in bytes from the
// start of the blob section.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "m3asr/features.hpp"
#include "m3asr/model.hpp"

namespace m3asr {

inline constexpr char kCheckpointMagic[4] = {'3', 'M', 'C', 'K'};

struct Checkpoint {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  ParamStore params;
};

inline void save_params(const fs::path& path, const ModelConfig& cfg, const ParamStore& params,
                        const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["config"] = cfg;
  header["meta"] = meta;
  header["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.entries()) {
    header["params"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write checkpoint " + tmp.string());
    os.write(kCheckpointMagic, 4);
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, t] : params.entries()) {
      for (double v : t.data()) detail::write_le(os, v);
    }
    if (!os) throw FormatError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void save_checkpoint(const fs::path& path, const Model& model,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  save_params(path, model.config(), model.params(), meta);
}

inline Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(path.string() + ": not a 3MCK checkpoint");
  const auto len = detail::read_le<std::uint64_t>(is);
  if (!is || len > (1ull << 32)) throw FormatError(path.string() + ": bad header length");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw FormatError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": header is not JSON: " + e.what());
  }
  Checkpoint ck;
  ck.config = header.at("config").get<ModelConfig>();
  if (header.contains("meta")) ck.meta = header["meta"];
  const auto blob_start = is.tellg();
  for (const auto& p : header.at("params")) {
    const auto name = p.at("name").get<std::string>();
    const auto shape = p.at("shape").get<Shape>();
    const auto offset = p.at("offset").get<std::uint64_t>();
    std::vector<double> v(shape_numel(shape));
    is.seekg(blob_start + static_cast<std::streamoff>(offset));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw FormatError(path.string() + ": truncated blob for " + name);
    for (double& x : v) x = detail::to_little(x);
    ck.params.add(name, Tensor(shape, std::move(v), true));
  }
  return ck;
}

inline Model load_model(const fs::path& path) {
  Checkpoint ck = read_checkpoint(path);
  return Model(ck.config, std::move(ck.params));
}

/// Overwrites every parameter of `model` that starts with `prefix` with the
/// same-named tensor in `source`. Returns the number of tensors copied.
inline std::size_t copy_params(Model& model, const ParamStore& source, const std::string& prefix) {
  std::size_t copied = 0;
  for (const auto& [name, t] : model.params().entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const Tensor& src = source.get(name);
    if (src.shape() != t.shape()) {
      throw std::invalid_argument("copy_params: shape mismatch for " + name + ": " + shape_str(src.shape()) +
                                  " vs " + shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    ++copied;
  }
  return copied;
}

}  // namespace m3asr
