#pragma once

// Full model: Conformer encoder (optionally MoE), CTC head, main attention
// decoder, auxiliary decoders on intermediate taps, and the shared embedding
// network with its own CTC head.
//
// Token ids: corpus tokens are [0, vocab). CTC classes are blank = 0 and
// token t -> t + 1. The decoders use t directly and id `vocab` for <sos>/<eos>.

#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "m3asr/conformer.hpp"
#include "m3asr/ctc.hpp"
#include "m3asr/decoder.hpp"
#include "m3asr/features.hpp"
#include "m3asr/moe.hpp"

namespace m3asr {

struct ModelConfig {
  std::size_t input_dim = 80;
  int vocab_size = 10;
  ConformerConfig encoder;
  std::size_t num_experts = 4;  // 0: dense Conformer without embedding network
  std::size_t expert_ff = 0;    // 0: encoder.d_ff
  std::size_t embed_blocks = 0; // 0: encoder.num_blocks / 2
  std::size_t embed_dim = 0;    // 0: encoder.d_att
  bool identical_expert_init = false;
  std::size_t decoder_blocks = 2;
  std::size_t decoder_ff = 0;   // 0: encoder.d_ff
  std::size_t num_levels = 3;   // K, counting the final decoder

  bool has_moe() const { return num_experts > 0; }
  std::size_t resolved_expert_ff() const { return expert_ff ? expert_ff : encoder.d_ff; }
  std::size_t resolved_embed_dim() const { return embed_dim ? embed_dim : encoder.d_att; }
  std::size_t resolved_embed_blocks() const {
    return embed_blocks ? embed_blocks : std::max<std::size_t>(1, encoder.num_blocks / 2);
  }
  std::size_t ctc_classes() const { return static_cast<std::size_t>(vocab_size) + 1; }
  std::size_t decoder_vocab() const { return static_cast<std::size_t>(vocab_size) + 1; }

  ConformerConfig embedding_config() const {
    ConformerConfig c = encoder;
    c.num_blocks = resolved_embed_blocks();
    c.d_att = resolved_embed_dim();
    return c;
  }

  DecoderConfig decoder_config() const {
    DecoderConfig d;
    d.num_blocks = decoder_blocks;
    d.d_att = encoder.d_att;
    d.d_ff = decoder_ff ? decoder_ff : encoder.d_ff;
    d.heads = encoder.heads;
    d.vocab = decoder_vocab();
    d.dropout = encoder.dropout;
    return d;
  }

  std::vector<std::size_t> taps() const { return tap_blocks(encoder.num_blocks, num_levels); }

  void validate() const {
    encoder.validate();
    if (vocab_size <= 0) throw std::invalid_argument("model: vocab_size must be positive");
    if (num_levels == 0) throw std::invalid_argument("model: need at least one decoder level");
    if (encoder.num_blocks == 0) throw std::invalid_argument("model: need at least one encoder block");
    (void)taps();
    if (has_moe()) embedding_config().validate();
  }
};

inline void to_json(nlohmann::json& j, const ConformerConfig& c) {
  j = {{"num_blocks", c.num_blocks}, {"d_att", c.d_att},   {"d_ff", c.d_ff},
       {"heads", c.heads},           {"kernel", c.kernel}, {"dropout", c.dropout},
       {"subsample_channels", c.subsample_channels}};
}

inline void from_json(const nlohmann::json& j, ConformerConfig& c) {
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.d_att = j.value("d_att", c.d_att);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.heads = j.value("heads", c.heads);
  c.kernel = j.value("kernel", c.kernel);
  c.dropout = j.value("dropout", c.dropout);
  c.subsample_channels = j.value("subsample_channels", c.subsample_channels);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_dim", c.input_dim},
       {"vocab_size", c.vocab_size},
       {"encoder", c.encoder},
       {"num_experts", c.num_experts},
       {"expert_ff", c.expert_ff},
       {"embed_blocks", c.embed_blocks},
       {"embed_dim", c.embed_dim},
       {"identical_expert_init", c.identical_expert_init},
       {"decoder_blocks", c.decoder_blocks},
       {"decoder_ff", c.decoder_ff},
       {"num_levels", c.num_levels}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  if (j.contains("encoder")) j.at("encoder").get_to(c.encoder);
  c.num_experts = j.value("num_experts", c.num_experts);
  c.expert_ff = j.value("expert_ff", c.expert_ff);
  c.embed_blocks = j.value("embed_blocks", c.embed_blocks);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.identical_expert_init = j.value("identical_expert_init", c.identical_expert_init);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.decoder_ff = j.value("decoder_ff", c.decoder_ff);
  c.num_levels = j.value("num_levels", c.num_levels);
}

inline const std::string kEncoderPrefix = "encoder";
inline const std::string kCtcHeadPrefix = "ctc_head";
inline const std::string kDecoderPrefix = "decoder";
inline const std::string kAuxDecoderPrefix = "aux_decoders";
inline const std::string kEmbedPrefix = "embed";

inline std::string aux_decoder_prefix(std::size_t i) { return kAuxDecoderPrefix + "." + std::to_string(i); }

/// Every parameter of the model described by cfg, in checkpoint order.
inline Manifest build_manifest(const ModelConfig& cfg) {
  cfg.validate();
  Manifest m;
  ConformerStack::declare(m, kEncoderPrefix, cfg.input_dim, cfg.encoder, cfg.num_experts, cfg.resolved_embed_dim(),
                          cfg.resolved_expert_ff(), cfg.identical_expert_init);
  Linear::declare(m, kCtcHeadPrefix, cfg.encoder.d_att, cfg.ctc_classes());
  TransformerDecoder::declare(m, kDecoderPrefix, cfg.decoder_config());
  for (std::size_t i = 0; i + 1 < cfg.num_levels; ++i) {
    TransformerDecoder::declare(m, aux_decoder_prefix(i), cfg.decoder_config());
  }
  if (cfg.has_moe()) {
    ConformerStack::declare(m, kEmbedPrefix, cfg.input_dim, cfg.embedding_config());
    Linear::declare(m, join(kEmbedPrefix, "ctc_head"), cfg.resolved_embed_dim(), cfg.ctc_classes());
  }
  return m;
}

inline std::vector<int> to_ctc_labels(const std::vector<int>& tokens) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(t + 1);
  return out;
}

inline std::vector<int> from_ctc_labels(const std::vector<int>& labels) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(l - 1);
  return out;
}

struct EmbeddingOutput {
  Tensor e_c;           // [T' x d_emb]
  Tensor ctc_logprobs;  // [T' x (vocab + 1)]
};

/// Per-utterance loss components, all still attached to the graph.
struct UtteranceLosses {
  Tensor ctc;                         // L_c
  std::vector<Tensor> aed;            // L_a_j, levels 1..K (last is the final decoder)
  Tensor embed_ctc;                   // L_e, undefined for dense models
  std::vector<RoutingRecord> routing; // one per MoE block
  std::size_t frames = 0;             // T'
};

class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    params_ = allocate(build_manifest(cfg_), seed);
    bind();
  }

  /// Adopts an existing store; it must match the manifest exactly.
  Model(ModelConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    const Manifest m = build_manifest(cfg_);
    if (m.size() != params_.size()) {
      throw std::invalid_argument("model: parameter store has " + std::to_string(params_.size()) +
                                  " tensors, manifest expects " + std::to_string(m.size()));
    }
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto& [name, t] = params_.entries()[i];
      if (name != m[i].name || t.shape() != m[i].shape) {
        throw std::invalid_argument("model: parameter " + name + " " + shape_str(t.shape()) +
                                    " does not match manifest entry " + m[i].name + " " + shape_str(m[i].shape));
      }
    }
    bind();
  }

  Model(const Model& other) : cfg_(other.cfg_), params_(other.params_.clone()) { bind(); }
  Model& operator=(const Model& other) {
    if (this != &other) {
      cfg_ = other.cfg_;
      params_ = other.params_.clone();
      bind();
    }
    return *this;
  }
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  const ConformerStack& encoder() const { return encoder_; }
  const TransformerDecoder& main_decoder() const { return decoder_; }
  const std::vector<TransformerDecoder>& aux_decoders() const { return aux_; }
  bool has_embedding() const { return embed_.has_value(); }

  EmbeddingOutput embed(const Tensor& feats, const ForwardContext& ctx) const {
    if (!embed_) throw std::logic_error("model has no embedding network");
    if (ctx.stats) ++ctx.stats->embedding_forwards;
    EncoderOutput eo = (*embed_)(feats, ctx);
    return {eo.final, log_softmax_last(embed_head_(eo.final))};
  }

  /// Encoder forward. MoE models need e_c from embed().
  EncoderOutput encode(const Tensor& feats, const ForwardContext& ctx, const Tensor* e_c = nullptr,
                       bool record_taps = true, const std::vector<std::vector<std::size_t>>* frozen = nullptr) const {
    return encoder_(feats, ctx, e_c, record_taps ? cfg_.taps() : std::vector<std::size_t>{}, frozen);
  }

  /// Embedding (when present) followed by the encoder; e_c is computed once.
  EncoderOutput encode_features(const Tensor& feats, const ForwardContext& ctx, const ForwardContext* embed_ctx = nullptr,
                                bool record_taps = true, EmbeddingOutput* embedding = nullptr,
                                const std::vector<std::vector<std::size_t>>* frozen = nullptr) const {
    if (!embed_) return encode(feats, ctx, nullptr, record_taps, frozen);
    EmbeddingOutput emb = embed(feats, embed_ctx ? *embed_ctx : ctx);
    EncoderOutput out = encode(feats, ctx, &emb.e_c, record_taps, frozen);
    if (embedding) *embedding = std::move(emb);
    return out;
  }

  Tensor ctc_logprobs(const Tensor& enc_final) const { return log_softmax_last(ctc_head_(enc_final)); }

  /// Decoder for level j in [1, K]; level K is the final decoder.
  const TransformerDecoder& level_decoder(std::size_t level) const {
    if (level == 0 || level > cfg_.num_levels) throw std::out_of_range("decoder level out of range");
    return level == cfg_.num_levels ? decoder_ : aux_[level - 1];
  }

  /// Encoder output feeding level j.
  const Tensor& level_input(const EncoderOutput& eo, std::size_t level) const {
    if (level == cfg_.num_levels) return eo.final;
    const std::size_t tap = cfg_.taps().at(level - 1);
    auto it = eo.taps.find(tap);
    if (it == eo.taps.end()) throw std::invalid_argument("missing encoder tap at block " + std::to_string(tap));
    return it->second;
  }

  UtteranceLosses losses(const Tensor& feats, const std::vector<int>& tokens, const ForwardContext& ctx,
                         double label_smoothing, const ForwardContext* embed_ctx = nullptr,
                         const std::vector<std::vector<std::size_t>>* frozen = nullptr) const {
    UtteranceLosses out;
    EmbeddingOutput emb;
    const EncoderOutput eo = encode_features(feats, ctx, embed_ctx, true, &emb, frozen);
    const std::vector<int> labels = to_ctc_labels(tokens);
    out.frames = eo.final.rows();
    out.ctc = ctc_loss(ctc_logprobs(eo.final), labels);
    const auto targets = aed_targets(tokens, cfg_.decoder_vocab() - 1);
    for (std::size_t level = 1; level <= cfg_.num_levels; ++level) {
      const Tensor lp = level_decoder(level).teacher_forced(level_input(eo, level), tokens, ctx);
      out.aed.push_back(aed_loss(lp, targets, label_smoothing));
    }
    if (embed_) out.embed_ctc = ctc_loss(emb.ctc_logprobs, labels);
    out.routing = eo.routing;
    return out;
  }

 private:
  void bind() {
    encoder_ = ConformerStack::bind(params_, kEncoderPrefix, cfg_.input_dim, cfg_.encoder);
    ctc_head_ = Linear::bind(params_, kCtcHeadPrefix);
    decoder_ = TransformerDecoder::bind(params_, kDecoderPrefix, cfg_.decoder_config());
    aux_.clear();
    for (std::size_t i = 0; i + 1 < cfg_.num_levels; ++i) {
      aux_.push_back(TransformerDecoder::bind(params_, aux_decoder_prefix(i), cfg_.decoder_config()));
    }
    embed_.reset();
    if (cfg_.has_moe()) {
      embed_ = ConformerStack::bind(params_, kEmbedPrefix, cfg_.input_dim, cfg_.embedding_config());
      embed_head_ = Linear::bind(params_, join(kEmbedPrefix, "ctc_head"));
    }
  }

  ModelConfig cfg_;
  ParamStore params_;
  ConformerStack encoder_;
  Linear ctc_head_;
  TransformerDecoder decoder_;
  std::vector<TransformerDecoder> aux_;
  std::optional<ConformerStack> embed_;
  Linear embed_head_;
};

/// Same model without auxiliary decoders (K = 1). Shares no storage with the input.
inline Model strip_auxiliary_decoders(const Model& model) {
  ModelConfig cfg = model.config();
  cfg.num_levels = 1;
  ParamStore store;
  for (const auto& [name, t] : model.params().entries()) {
    if (name.rfind(kAuxDecoderPrefix + ".", 0) == 0) continue;
    store.add(name, Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true));
  }
  return Model(cfg, std::move(store));
}

}  // namespace m3asr
