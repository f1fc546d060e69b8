#pragma once

// Parameter manifests, the parameter store, and the layers shared by the
// encoder, the embedding network and the decoders.
//
// A model is described first as a Manifest (ordered names, shapes and init
// rules) and then materialised into a ParamStore. Layers bind to the store by
// name, so the manifest is the single source of truth for parameter counts and
// for the checkpoint layout.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "m3asr/random.hpp"
#include "m3asr/tensor.hpp"

namespace m3asr {

enum class Init { kZeros, kOnes, kUniform, kNormal };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::kUniform;
  double scale = 0.0;
  std::string init_key;  // seeds the initial values; defaults to name

  std::size_t numel() const { return shape_numel(shape); }
};

using Manifest = std::vector<ParamSpec>;

inline std::size_t manifest_numel(const Manifest& m) {
  std::size_t n = 0;
  for (const auto& p : m) n += p.numel();
  return n;
}

class ParamStore {
 public:
  ParamStore() = default;

  void add(std::string name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("missing parameter " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& [_, t] : entries_) out.push_back(t);
    return out;
  }

  /// Tensors whose names start with prefix.
  std::vector<Tensor> tensors_with_prefix(const std::string& prefix) const {
    std::vector<Tensor> out;
    for (const auto& [n, t] : entries_)
      if (n.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  /// Deep copy (values only, fresh gradient buffers).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [n, t] : entries_) {
      out.add(n, Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true));
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Allocates every parameter of the manifest. Each tensor draws from its own
/// stream seeded by (seed, init_key), so values do not depend on what else the
/// manifest contains.
inline ParamStore allocate(const Manifest& manifest, std::uint64_t seed) {
  ParamStore store;
  for (const auto& spec : manifest) {
    std::vector<double> v(spec.numel(), 0.0);
    Rng rng(derive_seed(seed, spec.init_key.empty() ? spec.name : spec.init_key));
    switch (spec.init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        std::fill(v.begin(), v.end(), 1.0);
        break;
      case Init::kUniform:
        for (double& x : v) x = uniform_real(rng, -spec.scale, spec.scale);
        break;
      case Init::kNormal:
        for (double& x : v) x = normal(rng, 0.0, spec.scale);
        break;
    }
    store.add(spec.name, Tensor(spec.shape, std::move(v), true));
  }
  return store;
}

// ---------------------------------------------------------------------------

struct ForwardStats {
  std::size_t expert_frames = 0;       // frames pushed through any expert
  std::size_t embedding_forwards = 0;  // shared embedding network evaluations
};

struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  ForwardStats* stats = nullptr;
  std::vector<Tensor>* attention_sink = nullptr;  // receives every attention matrix

  Tensor drop(const Tensor& x) const { return m3asr::dropout(x, dropout, training, rng); }
};

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], may be undefined

  static void declare(Manifest& m, const std::string& prefix, std::size_t in, std::size_t out,
                      bool with_bias = true, const std::string& init_prefix = {}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    const std::string key = init_prefix.empty() ? prefix : init_prefix;
    m.push_back({join(prefix, "weight"), {in, out}, Init::kUniform, bound, join(key, "weight")});
    if (with_bias) m.push_back({join(prefix, "bias"), {out}, Init::kZeros, 0.0, join(key, "bias")});
  }

  static Linear bind(const ParamStore& s, const std::string& prefix) {
    Linear l;
    l.weight = s.get(join(prefix, "weight"));
    if (s.contains(join(prefix, "bias"))) l.bias = s.get(join(prefix, "bias"));
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static void declare(Manifest& m, const std::string& prefix, std::size_t d,
                      const std::string& init_prefix = {}) {
    const std::string key = init_prefix.empty() ? prefix : init_prefix;
    m.push_back({join(prefix, "gamma"), {d}, Init::kOnes, 0.0, join(key, "gamma")});
    m.push_back({join(prefix, "beta"), {d}, Init::kZeros, 0.0, join(key, "beta")});
  }

  static LayerNorm bind(const ParamStore& s, const std::string& prefix) {
    return {s.get(join(prefix, "gamma")), s.get(join(prefix, "beta"))};
  }

  Tensor operator()(const Tensor& x) const { return add(mul(layernorm(x), gamma), beta); }
};

/// Linear -> swish -> dropout -> Linear -> dropout. No normalisation.
struct FfnCore {
  Linear w1;
  Linear w2;

  static void declare(Manifest& m, const std::string& prefix, std::size_t d, std::size_t d_ff,
                      const std::string& init_prefix = {}) {
    Linear::declare(m, join(prefix, "w1"), d, d_ff, true, init_prefix.empty() ? "" : join(init_prefix, "w1"));
    Linear::declare(m, join(prefix, "w2"), d_ff, d, true, init_prefix.empty() ? "" : join(init_prefix, "w2"));
  }

  static FfnCore bind(const ParamStore& s, const std::string& prefix) {
    return {Linear::bind(s, join(prefix, "w1")), Linear::bind(s, join(prefix, "w2"))};
  }

  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const {
    return ctx.drop(w2(ctx.drop(swish(w1(x)))));
  }
};

/// Pre-norm feed-forward module.
struct FeedForward {
  LayerNorm norm;
  FfnCore core;

  static void declare(Manifest& m, const std::string& prefix, std::size_t d, std::size_t d_ff) {
    LayerNorm::declare(m, join(prefix, "norm"), d);
    FfnCore::declare(m, prefix, d, d_ff);
  }

  static FeedForward bind(const ParamStore& s, const std::string& prefix) {
    return {LayerNorm::bind(s, join(prefix, "norm")), FfnCore::bind(s, prefix)};
  }

  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const { return core(norm(x), ctx); }
};

inline constexpr double kMaskedLogit = -1e9;

/// Multi-head scaled dot-product attention (no normalisation, no residual).
struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static void declare(Manifest& m, const std::string& prefix, std::size_t d) {
    for (const char* n : {"q", "k", "v", "o"}) Linear::declare(m, join(prefix, n), d, d);
  }

  static MultiHeadAttention bind(const ParamStore& s, const std::string& prefix, std::size_t heads) {
    return {Linear::bind(s, join(prefix, "q")), Linear::bind(s, join(prefix, "k")),
            Linear::bind(s, join(prefix, "v")), Linear::bind(s, join(prefix, "o")), heads};
  }

  Tensor operator()(const Tensor& query, const Tensor& memory, bool causal, const ForwardContext& ctx) const {
    const std::size_t d = q.weight.dim(1);
    if (d % heads != 0) throw ShapeError("attention", "width not divisible by heads");
    const std::size_t dk = d / heads;
    const Tensor qs = q(query), ks = k(memory), vs = v(memory);
    const std::size_t tq = query.rows(), tk = memory.rows();
    std::vector<bool> mask;
    if (causal) {
      mask.resize(tq * tk);
      for (std::size_t i = 0; i < tq; ++i)
        for (std::size_t j = 0; j < tk; ++j) mask[i * tk + j] = j > i;
    }
    std::vector<Tensor> outs;
    outs.reserve(heads);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(qs, h * dk, (h + 1) * dk);
      const Tensor kh = slice_cols(ks, h * dk, (h + 1) * dk);
      const Tensor vh = slice_cols(vs, h * dk, (h + 1) * dk);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv);
      if (causal) scores = mask_fill(scores, mask, kMaskedLogit);
      const Tensor attn = softmax_last(scores);
      if (ctx.attention_sink) ctx.attention_sink->push_back(attn);
      outs.push_back(matmul(ctx.drop(attn), vh));
    }
    return o(heads == 1 ? outs[0] : concat_last(outs));
  }
};

/// Sinusoidal absolute position table [T x d].
inline Tensor sinusoidal_positions(std::size_t t_len, std::size_t d) {
  std::vector<double> v(t_len * d);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      v[t * d + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  return Tensor::matrix(t_len, d, std::move(v));
}

}  // namespace m3asr
