#pragma once

// Decoding, CER scoring and the parameter/FLOPs accountant.

#include <algorithm>
#include <cstdio>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "m3asr/ctc.hpp"
#include "m3asr/model.hpp"

namespace m3asr {

struct DecodeOptions {
  std::size_t beam = 10;
  std::size_t nbest = 8;
  double mu = 0.5;  // combined = aed_score + mu * ctc_score
};

struct DecodeResult {
  std::string utt_id;
  Hypothesis best;
  std::vector<Hypothesis> nbest;  // CTC order, each with aed_score and combined filled in
};

/// Combined score for every hypothesis, then the argmax; ties keep the higher
/// CTC rank. Operates in place so callers can re-rank with another mu.
inline std::size_t rerank(std::vector<Hypothesis>& nbest, double mu) {
  if (nbest.empty()) throw std::invalid_argument("rerank: empty N-best list");
  std::size_t best = 0;
  for (std::size_t i = 0; i < nbest.size(); ++i) {
    nbest[i].combined = nbest[i].aed_score + mu * nbest[i].ctc_score;
    if (nbest[i].combined > nbest[best].combined) best = i;
  }
  return best;
}

/// CTC prefix beam search on the final encoder output, attention rescoring of
/// the N-best with the main decoder. Tokens are corpus ids.
inline DecodeResult decode_utterance(const Model& model, const Tensor& feats, const DecodeOptions& opt = {}) {
  NoGradGuard ng;
  ForwardContext ctx;
  const EncoderOutput eo = model.encode_features(feats, ctx, nullptr, false);
  const Tensor lp = model.ctc_logprobs(eo.final);
  DecodeResult r;
  r.nbest = ctc_prefix_beam_search(lp, opt.beam, opt.nbest);
  for (auto& h : r.nbest) {
    h.tokens = from_ctc_labels(h.tokens);
    h.aed_score = rescore(model.main_decoder(), eo.final, h.tokens);
  }
  r.best = r.nbest[rerank(r.nbest, opt.mu)];
  return r;
}

inline nlohmann::json hypothesis_json(const std::string& utt_id, const Hypothesis& h) {
  return {{"utt_id", utt_id},
          {"tokens", h.tokens},
          {"ctc_score", h.ctc_score},
          {"aed_score", h.aed_score},
          {"combined", h.combined}};
}

/// Decodes every sequence, optionally on several threads. Results keep input order.
inline std::vector<DecodeResult> decode_corpus(const Model& model, const std::vector<FeatureSequence>& data,
                                               const DecodeOptions& opt = {}, std::size_t workers = 1) {
  std::vector<DecodeResult> out(data.size());
  auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < data.size(); i += stride) {
      out[i] = decode_utterance(model, data[i].feats.to_tensor(), opt);
      out[i].utt_id = data[i].utt_id;
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, data.size()));
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    for (auto& t : pool) t.join();
  }
  return out;
}

// ---------------------------------------------------------------------------
// CER

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t total() const { return substitutions + deletions + insertions; }
};

/// Levenshtein alignment of hyp against ref with unit costs. Among optimal
/// alignments the backtrace prefers substitution, then deletion, then insertion.
inline EditCounts edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), at(i - 1, j) + 1, at(i, j - 1) + 1});
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])) {
      c.substitutions += ref[i - 1] != hyp[j - 1];
      --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions, --i;
    } else {
      ++c.insertions, --j;
    }
  }
  return c;
}

struct ScoredResult {
  std::string utt_id;
  std::vector<int> reference;
  std::vector<int> hypothesis;
  EditCounts edits;
  std::size_t ref_length() const { return reference.size(); }
  double cer() const { return static_cast<double>(edits.total()) / static_cast<double>(reference.size()); }
};

inline ScoredResult score_utterance(std::string utt_id, std::vector<int> ref, std::vector<int> hyp) {
  ScoredResult r{std::move(utt_id), std::move(ref), std::move(hyp), {}};
  r.edits = edit_distance(r.reference, r.hypothesis);
  return r;
}

struct CorpusScore {
  double cer = 0.0;
  std::size_t errors = 0;
  std::size_t ref_tokens = 0;
  std::vector<ScoredResult> utterances;   // scored rows
  std::vector<std::string> excluded;      // utt_ids with empty references
};

/// Corpus CER = sum(S + D + I) / sum(len(ref)). Empty references are excluded
/// and listed in `excluded`.
inline CorpusScore score_corpus(const std::vector<ScoredResult>& results) {
  CorpusScore s;
  for (const auto& r : results) {
    if (r.reference.empty()) {
      s.excluded.push_back(r.utt_id);
      continue;
    }
    s.errors += r.edits.total();
    s.ref_tokens += r.reference.size();
    s.utterances.push_back(r);
  }
  if (s.ref_tokens == 0) throw std::invalid_argument("score_corpus: no non-empty references");
  s.cer = static_cast<double>(s.errors) / static_cast<double>(s.ref_tokens);
  return s;
}

inline std::string format_score_table(const CorpusScore& s) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-16s %6s %4s %4s %4s %8s\n", "utt_id", "ref", "S", "D", "I", "CER");
  os << line;
  for (const auto& r : s.utterances) {
    std::snprintf(line, sizeof(line), "%-16s %6zu %4zu %4zu %4zu %8.4f\n", r.utt_id.c_str(), r.ref_length(),
                  r.edits.substitutions, r.edits.deletions, r.edits.insertions, r.cer());
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-16s %6zu %19zu %8.4f\n", "TOTAL", s.ref_tokens, s.errors, s.cer);
  os << line;
  return os.str();
}

// ---------------------------------------------------------------------------
// Cost accounting
//
// One second of input is 100 frames. A multiply-add counts 2 FLOPs, softmax
// and layer norm count 5 FLOPs per element, every other elementwise op 1.
// Only the inference path is counted: the decoders (rescoring cost depends on
// N and the hypothesis lengths) and the embedding network's CTC head are
// excluded.

inline constexpr std::size_t kFramesPerSecond = 100;
inline constexpr double kNormFlopsPerElement = 5.0;

struct CostReport {
  std::string name;
  std::size_t params = 0;            // everything in the checkpoint manifest
  std::size_t inference_params = 0;  // without auxiliary decoders
  std::size_t input_frames = kFramesPerSecond;
  std::size_t encoder_frames = 0;
  std::map<std::string, double> components;  // subsample, attention, conv, dense_ffn, moe_expert, router,
                                             // embedding_network, ctc_head
  double flops = 0.0;              // all components except the router
  double flops_with_router = 0.0;  // every component
};

namespace detail {

struct FlopCounter {
  double t;  // frames

  double linear(double in, double out) const { return t * (2.0 * in * out + out); }
  double norm(double d) const { return t * kNormFlopsPerElement * d; }
  double elementwise(double d, double per = 1.0) const { return t * d * per; }
};

inline double subsample_flops(std::size_t input_frames, std::size_t input_dim, std::size_t channels, std::size_t d) {
  const double c = static_cast<double>(channels);
  const double t1 = static_cast<double>((input_frames - 3) / 2 + 1), f1 = static_cast<double>((input_dim - 3) / 2 + 1);
  const double t2 = static_cast<double>(subsampled_length(input_frames));
  const double f2 = static_cast<double>(subsampled_length(input_dim));
  double s = t1 * f1 * c * (2.0 * 9.0 + 2.0);      // conv1 + bias + relu
  s += t2 * f2 * c * (2.0 * 9.0 * c + 2.0);        // conv2 + bias + relu
  s += FlopCounter{t2}.linear(f2 * c, static_cast<double>(d));
  s += t2 * static_cast<double>(d);                // positional encoding add
  return s;
}

inline double attention_flops(double t, double d, double heads) {
  const FlopCounter f{t};
  double s = f.norm(d) + 4.0 * f.linear(d, d);
  s += 2.0 * t * t * d;                // scores
  s += heads * t * t;                  // scaling
  s += kNormFlopsPerElement * heads * t * t;  // softmax
  s += 2.0 * t * t * d;                // weighted sum
  return s + f.elementwise(d);         // residual
}

inline double conv_flops(double t, double d, double kernel) {
  const FlopCounter f{t};
  double s = f.norm(d) + f.linear(d, 2.0 * d) + f.elementwise(d, 2.0);  // pw1, GLU
  s += t * d * (2.0 * kernel + 1.0);                                    // depthwise + bias
  s += f.norm(d) + f.elementwise(d, 2.0) + f.linear(d, d);              // LN, swish, pw2
  return s + f.elementwise(d);                                          // residual
}

/// Pre-norm half-step FFN with residual.
inline double ffn_flops(double t, double d, double ff) {
  const FlopCounter f{t};
  return f.norm(d) + f.linear(d, ff) + f.elementwise(ff, 2.0) + f.linear(ff, d) + f.elementwise(d, 2.0);
}

}  // namespace detail

/// Closed-form cost of one second of audio for cfg. Parameter counts come
/// from the manifest, so nothing is allocated.
inline CostReport cost_report(const ModelConfig& cfg, std::string name = {}) {
  cfg.validate();
  CostReport r;
  r.name = std::move(name);
  const Manifest manifest = build_manifest(cfg);
  r.params = manifest_numel(manifest);
  for (const auto& p : manifest)
    if (p.name.rfind(kAuxDecoderPrefix + ".", 0) != 0) r.inference_params += p.numel();
  r.encoder_frames = subsampled_length(r.input_frames);

  const double t = static_cast<double>(r.encoder_frames);
  const auto& e = cfg.encoder;
  const double d = static_cast<double>(e.d_att), ff = static_cast<double>(e.d_ff);
  const double blocks = static_cast<double>(e.num_blocks);
  const detail::FlopCounter f{t};
  auto& c = r.components;
  c["subsample"] = detail::subsample_flops(r.input_frames, cfg.input_dim, e.subsample_channels, e.d_att);
  c["attention"] = blocks * detail::attention_flops(t, d, static_cast<double>(e.heads));
  c["conv"] = blocks * detail::conv_flops(t, d, static_cast<double>(e.kernel));
  // ffn1 in every block plus the block-final layer norm.
  c["dense_ffn"] = blocks * (detail::ffn_flops(t, d, ff) + f.norm(d));
  c["moe_expert"] = 0.0;
  c["router"] = 0.0;
  c["embedding_network"] = 0.0;
  if (cfg.has_moe()) {
    const double n = static_cast<double>(cfg.num_experts);
    const double d_emb = static_cast<double>(cfg.resolved_embed_dim());
    // One expert per frame, plus the gate multiply.
    c["moe_expert"] = blocks * (detail::ffn_flops(t, d, static_cast<double>(cfg.resolved_expert_ff())) + f.elementwise(d));
    c["router"] = blocks * (2.0 * t * (d_emb + d) * n + kNormFlopsPerElement * t * n + t * n);
    const ConformerConfig ec = cfg.embedding_config();
    const double de = static_cast<double>(ec.d_att);
    const double per_block = detail::attention_flops(t, de, static_cast<double>(ec.heads)) +
                             detail::conv_flops(t, de, static_cast<double>(ec.kernel)) +
                             2.0 * detail::ffn_flops(t, de, static_cast<double>(ec.d_ff)) + f.norm(de);
    c["embedding_network"] = detail::subsample_flops(r.input_frames, cfg.input_dim, ec.subsample_channels, ec.d_att) +
                             static_cast<double>(ec.num_blocks) * per_block;
  } else {
    c["dense_ffn"] += blocks * detail::ffn_flops(t, d, ff);
  }
  const double classes = static_cast<double>(cfg.ctc_classes());
  c["ctc_head"] = f.linear(d, classes) + kNormFlopsPerElement * t * classes;

  for (const auto& [k, v] : c) {
    r.flops_with_router += v;
    if (k != "router") r.flops += v;
  }
  return r;
}

inline nlohmann::json cost_report_json(const CostReport& r) {
  return {{"model", r.name},
          {"params", r.params},
          {"inference_params", r.inference_params},
          {"input_frames", r.input_frames},
          {"encoder_frames", r.encoder_frames},
          {"flops", r.flops},
          {"flops_with_router", r.flops_with_router},
          {"components", r.components},
          {"convention", "multiply-add = 2 FLOPs; softmax and layer norm = 5 FLOPs per element; "
                         "other elementwise ops = 1; one second = 100 input frames; decoders excluded"}};
}

inline std::string human_count(double v) {
  char buf[32];
  if (v >= 1e9) std::snprintf(buf, sizeof(buf), "%.2fB", v / 1e9);
  else if (v >= 1e6) std::snprintf(buf, sizeof(buf), "%.1fM", v / 1e6);
  else if (v >= 1e3) std::snprintf(buf, sizeof(buf), "%.1fK", v / 1e3);
  else std::snprintf(buf, sizeof(buf), "%.0f", v);
  return buf;
}

/// Aligned Model | Params | FLOPs table.
inline std::string format_cost_table(const std::vector<CostReport>& reports) {
  std::size_t w = 5;
  for (const auto& r : reports) w = std::max(w, r.name.size());
  std::ostringstream os;
  os << "# multiply-add = 2 FLOPs; softmax/LN = 5 FLOPs per element; one second = 100 frames\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %10s  %10s  %12s\n", static_cast<int>(w), "Model", "Params", "FLOPs",
                "+router");
  os << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-*s  %10s  %10s  %12s\n", static_cast<int>(w), r.name.c_str(),
                  human_count(static_cast<double>(r.params)).c_str(), human_count(r.flops).c_str(),
                  human_count(r.flops_with_router).c_str());
    os << line;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Reference configurations at the published scale.

enum class Preset { kConformer, kConformerMoE16, k3M16, k3M32, k3M64 };

inline ModelConfig reference_config(Preset p) {
  ModelConfig c;
  c.input_dim = 80;
  c.vocab_size = 5561;
  c.encoder.num_blocks = 18;
  c.encoder.d_att = 512;
  c.encoder.d_ff = 2048;
  c.encoder.heads = 8;
  c.encoder.kernel = 15;
  c.encoder.subsample_channels = 512;
  c.encoder.dropout = 0.1;
  c.decoder_blocks = 2;
  c.expert_ff = 1024;
  c.embed_blocks = 7;
  c.num_levels = 1;
  switch (p) {
    case Preset::kConformer: c.num_experts = 0; break;
    case Preset::kConformerMoE16: c.num_experts = 16; break;
    case Preset::k3M16: c.num_experts = 16; c.num_levels = 3; break;
    case Preset::k3M32: c.num_experts = 32; c.num_levels = 3; break;
    case Preset::k3M64: c.num_experts = 64; c.num_levels = 3; break;
  }
  return c;
}

inline const std::vector<std::pair<std::string, Preset>>& reference_presets() {
  static const std::vector<std::pair<std::string, Preset>> v{{"Conformer", Preset::kConformer},
                                                             {"Conformer-MoE (16e)", Preset::kConformerMoE16},
                                                             {"3M (16e)", Preset::k3M16},
                                                             {"3M (32e)", Preset::k3M32},
                                                             {"3M (64e)", Preset::k3M64}};
  return v;
}

}  // namespace m3asr
