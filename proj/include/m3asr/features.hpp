#pragma once

// Feature ingestion: JSON-lines manifests, the FB01 binary matrix format,
// global CMVN and SpecAugment masking, plus a deterministic synthetic corpus.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3asr/random.hpp"

namespace m3asr {

namespace fs = std::filesystem;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major [frames x dims] matrix with value semantics.
struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t dims = 0;
  std::vector<double> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t t, std::size_t d) : frames(t), dims(d), values(t * d, 0.0) {}
  double& at(std::size_t t, std::size_t d) { return values[t * dims + d]; }
  double at(std::size_t t, std::size_t d) const { return values[t * dims + d]; }
  Tensor to_tensor() const { return Tensor::matrix(frames, dims, values); }
  bool operator==(const FeatureMatrix&) const = default;
};

struct FeatureSequence {
  std::string utt_id;
  FeatureMatrix feats;
  std::vector<int> tokens;
};

// ---------------------------------------------------------------------------
// FB01: "FB01", u32 T, u32 D (little endian), then T*D little-endian float32.

namespace detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
  }
  return v;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return to_little(v);
}

}  // namespace detail

inline void write_feature_file(const fs::path& path, const FeatureMatrix& m) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write("FB01", 4);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.frames));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.dims));
  for (double v : m.values) detail::write_le<float>(os, static_cast<float>(v));
  if (!os) throw FormatError("write failed for " + path.string());
}

inline FeatureMatrix read_feature_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open feature file " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FB01", 4) != 0) throw FormatError(path.string() + ": bad magic");
  const auto t = detail::read_le<std::uint32_t>(is);
  const auto d = detail::read_le<std::uint32_t>(is);
  if (!is) throw FormatError(path.string() + ": truncated header");
  FeatureMatrix m(t, d);
  for (double& v : m.values) {
    v = static_cast<double>(detail::read_le<float>(is));
  }
  if (!is) throw FormatError(path.string() + ": truncated payload");
  return m;
}

// ---------------------------------------------------------------------------
// Manifest

/// Lazy reference to one utterance; features are read on load().
struct FeatureHandle {
  std::string utt_id;
  fs::path feats_path;
  std::vector<int> tokens;

  FeatureSequence load() const {
    FeatureSequence seq{utt_id, read_feature_file(feats_path), tokens};
    if (seq.feats.frames == 0) throw FormatError(utt_id + ": feature matrix has no frames");
    for (double v : seq.feats.values)
      if (!std::isfinite(v)) throw FormatError(utt_id + ": non-finite feature value");
    return seq;
  }
};

/// Parses a JSON-lines manifest. Relative feats_path entries resolve against the
/// manifest's directory. vocab_size == 0 skips the upper-bound token check.
inline std::vector<FeatureHandle> load_manifest(const fs::path& path, int vocab_size = 0) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open manifest " + path.string());
  std::vector<FeatureHandle> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("utt_id") || !j["utt_id"].is_string() ||
        !j.contains("feats_path") || !j["feats_path"].is_string() || !j.contains("tokens") ||
        !j["tokens"].is_array()) {
      throw FormatError(where + ": expected keys utt_id (string), feats_path (string), tokens (array)");
    }
    FeatureHandle h;
    h.utt_id = j["utt_id"].get<std::string>();
    fs::path fp = j["feats_path"].get<std::string>();
    h.feats_path = fp.is_absolute() ? fp : path.parent_path() / fp;
    for (const auto& t : j["tokens"]) {
      if (!t.is_number_integer() || t.get<long long>() < 0) {
        throw FormatError(where + ": token ids must be non-negative integers");
      }
      const long long id = t.get<long long>();
      if (vocab_size > 0 && id >= vocab_size) {
        throw FormatError(where + ": token id " + std::to_string(id) + " >= vocab size " +
                          std::to_string(vocab_size));
      }
      h.tokens.push_back(static_cast<int>(id));
    }
    if (!fs::exists(h.feats_path)) {
      throw FormatError("utterance " + h.utt_id + ": missing feature file " + h.feats_path.string());
    }
    out.push_back(std::move(h));
  }
  return out;
}

inline void write_manifest(const fs::path& path, const std::vector<FeatureHandle>& entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& e : entries) {
    nlohmann::json j;
    j["utt_id"] = e.utt_id;
    fs::path rel = e.feats_path.lexically_relative(path.parent_path());
    j["feats_path"] = (rel.empty() ? e.feats_path : rel).generic_string();
    j["tokens"] = e.tokens;
    os << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// CMVN

struct CmvnStats {
  std::vector<double> mean;
  std::vector<double> var;
  std::size_t frames = 0;

  std::size_t dims() const { return mean.size(); }
};

inline constexpr double kCmvnEps = 1e-9;

/// Global statistics accumulated over every frame of every sequence.
inline CmvnStats compute_cmvn(const std::vector<FeatureMatrix>& mats) {
  if (mats.empty()) throw std::invalid_argument("compute_cmvn: no features");
  const std::size_t d = mats.front().dims;
  CmvnStats st;
  st.mean.assign(d, 0.0);
  st.var.assign(d, 0.0);
  for (const auto& m : mats) {
    if (m.dims != d) throw std::invalid_argument("compute_cmvn: inconsistent feature dims");
    for (std::size_t t = 0; t < m.frames; ++t)
      for (std::size_t k = 0; k < d; ++k) st.mean[k] += m.at(t, k);
    st.frames += m.frames;
  }
  if (st.frames == 0) throw std::invalid_argument("compute_cmvn: no frames");
  for (double& v : st.mean) v /= static_cast<double>(st.frames);
  for (const auto& m : mats)
    for (std::size_t t = 0; t < m.frames; ++t)
      for (std::size_t k = 0; k < d; ++k) {
        const double c = m.at(t, k) - st.mean[k];
        st.var[k] += c * c;
      }
  for (double& v : st.var) v /= static_cast<double>(st.frames);
  return st;
}

inline FeatureSequence apply_cmvn(const FeatureSequence& seq, const CmvnStats& stats) {
  if (stats.dims() != seq.feats.dims || stats.var.size() != stats.mean.size()) {
    throw std::invalid_argument("apply_cmvn: stats dimension " + std::to_string(stats.dims()) +
                                " != feature dimension " + std::to_string(seq.feats.dims));
  }
  FeatureSequence out = seq;
  for (std::size_t t = 0; t < out.feats.frames; ++t)
    for (std::size_t k = 0; k < out.feats.dims; ++k) {
      out.feats.at(t, k) = (seq.feats.at(t, k) - stats.mean[k]) / std::sqrt(stats.var[k] + kCmvnEps);
    }
  return out;
}

inline FeatureSequence invert_cmvn(const FeatureSequence& seq, const CmvnStats& stats) {
  if (stats.dims() != seq.feats.dims) throw std::invalid_argument("invert_cmvn: dimension mismatch");
  FeatureSequence out = seq;
  for (std::size_t t = 0; t < out.feats.frames; ++t)
    for (std::size_t k = 0; k < out.feats.dims; ++k) {
      out.feats.at(t, k) = seq.feats.at(t, k) * std::sqrt(stats.var[k] + kCmvnEps) + stats.mean[k];
    }
  return out;
}

inline nlohmann::json cmvn_to_json(const CmvnStats& st) {
  return {{"mean", st.mean}, {"var", st.var}, {"frames", st.frames}};
}

inline CmvnStats cmvn_from_json(const nlohmann::json& j) {
  CmvnStats st;
  st.mean = j.at("mean").get<std::vector<double>>();
  st.var = j.at("var").get<std::vector<double>>();
  st.frames = j.at("frames").get<std::size_t>();
  if (st.mean.size() != st.var.size()) throw FormatError("cmvn: mean/var length mismatch");
  if (st.frames == 0) throw FormatError("cmvn: frame count must be positive");
  for (double v : st.var)
    if (!(v >= 0.0)) throw FormatError("cmvn: negative variance");
  return st;
}

inline void save_cmvn(const fs::path& path, const CmvnStats& st) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << cmvn_to_json(st).dump(2) << '\n';
}

inline CmvnStats load_cmvn(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open cmvn stats " + path.string());
  try {
    return cmvn_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// SpecAugment

struct SpecAugmentConfig {
  std::size_t max_freq_width = 30;  // F
  std::size_t max_time_width = 50;  // T
  std::size_t num_freq_masks = 2;
  std::size_t num_time_masks = 2;
};

struct MaskSpan {
  std::size_t start = 0;
  std::size_t width = 0;
};

struct AppliedMasks {
  std::vector<MaskSpan> freq;
  std::vector<MaskSpan> time;
};

/// Zeroes random frequency bands and time spans. Widths are uniform in [0, max]
/// (time widths clipped to the sequence length); starts are uniform over the
/// valid offsets. Frequency masks are drawn before time masks.
inline FeatureSequence spec_augment(const FeatureSequence& seq, Rng& rng, const SpecAugmentConfig& cfg = {},
                                    AppliedMasks* applied = nullptr) {
  const std::size_t t_len = seq.feats.frames, d = seq.feats.dims;
  if (cfg.max_freq_width > d) {
    throw std::invalid_argument("spec_augment: max frequency width " + std::to_string(cfg.max_freq_width) +
                                " exceeds feature dimension " + std::to_string(d));
  }
  FeatureSequence out = seq;
  AppliedMasks masks;
  for (std::size_t i = 0; i < cfg.num_freq_masks; ++i) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.max_freq_width)));
    const auto s = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(d - w)));
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t k = s; k < s + w; ++k) out.feats.at(t, k) = 0.0;
    masks.freq.push_back({s, w});
  }
  for (std::size_t i = 0; i < cfg.num_time_masks; ++i) {
    auto w = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.max_time_width)));
    w = std::min(w, t_len);
    const auto s = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(t_len - w)));
    for (std::size_t t = s; t < s + w; ++t)
      for (std::size_t k = 0; k < d; ++k) out.feats.at(t, k) = 0.0;
    masks.time.push_back({s, w});
  }
  if (applied) *applied = std::move(masks);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticCorpusConfig {
  std::size_t num_utts = 50;
  int vocab_size = 10;
  std::size_t dims = 80;
  std::uint64_t seed = 1;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 6;
  std::size_t min_token_frames = 10;
  std::size_t max_token_frames = 14;
  std::size_t min_gap_frames = 4;
  std::size_t max_gap_frames = 6;
  std::size_t min_edge_frames = 4;
  std::size_t max_edge_frames = 8;
  double noise = 0.3;
  double train_fraction = 0.9;
};

namespace detail {

// Smooth spectral shape made of a few Gaussian bumps on a low floor.
inline std::vector<double> spectral_pattern(Rng& rng, std::size_t dims) {
  std::vector<double> p(dims, -2.0);
  const int bumps = static_cast<int>(uniform_int(rng, 2, 3));
  for (int b = 0; b < bumps; ++b) {
    const double centre = uniform_real(rng, 0.0, static_cast<double>(dims - 1));
    const double width = uniform_real(rng, 2.0, 6.0);
    const double height = uniform_real(rng, 2.5, 4.0);
    for (std::size_t k = 0; k < dims; ++k) {
      const double z = (static_cast<double>(k) - centre) / width;
      p[k] += height * std::exp(-0.5 * z * z);
    }
  }
  return p;
}

}  // namespace detail

/// Deterministic token-conditioned pseudo features. Each token owns an onset and
/// an offset spectral pattern; its segment interpolates between them. Segments
/// are separated by low-energy gaps so repeated tokens stay separable.
inline std::vector<FeatureSequence> synthesize_corpus(const SyntheticCorpusConfig& cfg) {
  if (cfg.vocab_size <= 0 || cfg.dims == 0) throw std::invalid_argument("synthesize_corpus: bad config");
  std::vector<std::vector<double>> onset, offset;
  for (int v = 0; v < cfg.vocab_size; ++v) {
    Rng r(derive_seed(cfg.seed, static_cast<std::uint64_t>(v), "token-pattern"));
    onset.push_back(detail::spectral_pattern(r, cfg.dims));
    offset.push_back(detail::spectral_pattern(r, cfg.dims));
  }
  std::vector<FeatureSequence> out;
  for (std::size_t u = 0; u < cfg.num_utts; ++u) {
    Rng r(derive_seed(cfg.seed, u, "utterance"));
    FeatureSequence seq;
    char name[32];
    std::snprintf(name, sizeof(name), "utt%04zu", u);
    seq.utt_id = name;
    const auto n_tok = static_cast<std::size_t>(uniform_int(
        r, static_cast<std::int64_t>(cfg.min_tokens), static_cast<std::int64_t>(cfg.max_tokens)));
    std::vector<std::vector<double>> frames;
    auto silence = [&](std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> f(cfg.dims);
        for (double& x : f) x = -2.0 + cfg.noise * normal(r);
        frames.push_back(std::move(f));
      }
    };
    silence(static_cast<std::size_t>(uniform_int(r, static_cast<std::int64_t>(cfg.min_edge_frames),
                                                 static_cast<std::int64_t>(cfg.max_edge_frames))));
    for (std::size_t i = 0; i < n_tok; ++i) {
      const int tok = static_cast<int>(uniform_int(r, 0, cfg.vocab_size - 1));
      seq.tokens.push_back(tok);
      const auto len = static_cast<std::size_t>(uniform_int(r, static_cast<std::int64_t>(cfg.min_token_frames),
                                                            static_cast<std::int64_t>(cfg.max_token_frames)));
      const double gain = uniform_real(r, 0.85, 1.15);
      for (std::size_t t = 0; t < len; ++t) {
        const double a = len > 1 ? static_cast<double>(t) / static_cast<double>(len - 1) : 0.0;
        std::vector<double> f(cfg.dims);
        for (std::size_t k = 0; k < cfg.dims; ++k) {
          const double shape = (1.0 - a) * onset[tok][k] + a * offset[tok][k];
          f[k] = -2.0 + gain * (shape + 2.0) + cfg.noise * normal(r);
        }
        frames.push_back(std::move(f));
      }
      if (i + 1 < n_tok) {
        silence(static_cast<std::size_t>(uniform_int(r, static_cast<std::int64_t>(cfg.min_gap_frames),
                                                     static_cast<std::int64_t>(cfg.max_gap_frames))));
      }
    }
    silence(static_cast<std::size_t>(uniform_int(r, static_cast<std::int64_t>(cfg.min_edge_frames),
                                                 static_cast<std::int64_t>(cfg.max_edge_frames))));
    seq.feats = FeatureMatrix(frames.size(), cfg.dims);
    for (std::size_t t = 0; t < frames.size(); ++t)
      for (std::size_t k = 0; k < cfg.dims; ++k) {
        // Round through float32 so in-memory and on-disk corpora agree exactly.
        seq.feats.at(t, k) = static_cast<double>(static_cast<float>(frames[t][k]));
      }
    out.push_back(std::move(seq));
  }
  return out;
}

inline std::size_t train_split_size(std::size_t num_utts, double train_fraction) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(num_utts) * train_fraction));
}

struct PreparedCorpus {
  fs::path train_manifest;
  fs::path dev_manifest;
  fs::path cmvn;
  std::size_t train_count = 0;
  std::size_t dev_count = 0;
};

/// Writes feats/*.fb, train.jsonl, dev.jsonl and cmvn.json (train split stats).
inline PreparedCorpus write_synthetic_corpus(const fs::path& out_dir, const SyntheticCorpusConfig& cfg) {
  std::error_code ec;
  fs::create_directories(out_dir / "feats", ec);
  if (ec) throw FormatError("cannot create " + (out_dir / "feats").string() + ": " + ec.message());
  const auto corpus = synthesize_corpus(cfg);
  const std::size_t n_train = train_split_size(corpus.size(), cfg.train_fraction);
  std::vector<FeatureHandle> train, dev;
  std::vector<FeatureMatrix> train_feats;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const fs::path fp = out_dir / "feats" / (corpus[i].utt_id + ".fb");
    write_feature_file(fp, corpus[i].feats);
    FeatureHandle h{corpus[i].utt_id, fp, corpus[i].tokens};
    if (i < n_train) {
      train.push_back(h);
      train_feats.push_back(corpus[i].feats);
    } else {
      dev.push_back(h);
    }
  }
  PreparedCorpus pc{out_dir / "train.jsonl", out_dir / "dev.jsonl", out_dir / "cmvn.json", train.size(), dev.size()};
  write_manifest(pc.train_manifest, train);
  write_manifest(pc.dev_manifest, dev);
  save_cmvn(pc.cmvn, compute_cmvn(train_feats));
  return pc;
}

}  // namespace m3asr
