#pragma once

// Autoregressive transformer decoder used for the attention branch.
// Vocabulary: ids [0, vocab) are output tokens, id `vocab` is the shared
// <sos>/<eos> symbol, so the decoder predicts over V = vocab + 1 classes.

#include <string>
#include <vector>

#include "m3asr/nn.hpp"

namespace m3asr {

struct DecoderConfig {
  std::size_t num_blocks = 2;
  std::size_t d_att = 64;
  std::size_t d_ff = 128;
  std::size_t heads = 4;
  std::size_t vocab = 11;  // includes <sos>/<eos>, excludes the CTC blank
  double dropout = 0.1;

  std::size_t sos_eos() const { return vocab - 1; }
};

struct DecoderBlock {
  LayerNorm norm_self;
  MultiHeadAttention self_attn;
  LayerNorm norm_cross;
  MultiHeadAttention cross_attn;
  FeedForward ffn;

  static void declare(Manifest& m, const std::string& prefix, const DecoderConfig& c) {
    LayerNorm::declare(m, join(prefix, "norm_self"), c.d_att);
    MultiHeadAttention::declare(m, join(prefix, "self_attn"), c.d_att);
    LayerNorm::declare(m, join(prefix, "norm_cross"), c.d_att);
    MultiHeadAttention::declare(m, join(prefix, "cross_attn"), c.d_att);
    FeedForward::declare(m, join(prefix, "ffn"), c.d_att, c.d_ff);
  }

  static DecoderBlock bind(const ParamStore& s, const std::string& prefix, std::size_t heads) {
    return {LayerNorm::bind(s, join(prefix, "norm_self")),
            MultiHeadAttention::bind(s, join(prefix, "self_attn"), heads),
            LayerNorm::bind(s, join(prefix, "norm_cross")),
            MultiHeadAttention::bind(s, join(prefix, "cross_attn"), heads), FeedForward::bind(s, join(prefix, "ffn"))};
  }

  Tensor operator()(const Tensor& x, const Tensor& memory, const ForwardContext& ctx) const {
    Tensor h = norm_self(x);
    Tensor y = add(x, ctx.drop(self_attn(h, h, true, ctx)));
    y = add(y, ctx.drop(cross_attn(norm_cross(y), memory, false, ctx)));
    return add(y, ffn(y, ctx));
  }
};

struct TransformerDecoder {
  DecoderConfig config;
  Tensor embed;  // [V x d]
  std::vector<DecoderBlock> blocks;
  LayerNorm final_norm;
  Linear out;

  static void declare(Manifest& m, const std::string& prefix, const DecoderConfig& c) {
    m.push_back({join(prefix, "embed"), {c.vocab, c.d_att}, Init::kNormal, 1.0, {}});
    for (std::size_t b = 0; b < c.num_blocks; ++b) DecoderBlock::declare(m, join(prefix, "blocks." + std::to_string(b)), c);
    LayerNorm::declare(m, join(prefix, "final_norm"), c.d_att);
    Linear::declare(m, join(prefix, "out"), c.d_att, c.vocab);
  }

  static TransformerDecoder bind(const ParamStore& s, const std::string& prefix, const DecoderConfig& c) {
    TransformerDecoder d;
    d.config = c;
    d.embed = s.get(join(prefix, "embed"));
    for (std::size_t b = 0; b < c.num_blocks; ++b)
      d.blocks.push_back(DecoderBlock::bind(s, join(prefix, "blocks." + std::to_string(b)), c.heads));
    d.final_norm = LayerNorm::bind(s, join(prefix, "final_norm"));
    d.out = Linear::bind(s, join(prefix, "out"));
    return d;
  }

  /// Log-distributions [(L+1) x V]; row t conditions on <sos> + tokens[0..t).
  Tensor teacher_forced(const Tensor& memory, const std::vector<int>& tokens, const ForwardContext& ctx) const {
    std::vector<std::size_t> inputs{config.sos_eos()};
    for (int t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= config.vocab) {
        throw std::out_of_range("decoder: token id " + std::to_string(t) + " >= vocabulary " +
                                std::to_string(config.vocab));
      }
      inputs.push_back(static_cast<std::size_t>(t));
    }
    Tensor h = add(embedding_lookup(embed, inputs), sinusoidal_positions(inputs.size(), config.d_att));
    h = ctx.drop(h);
    for (const auto& b : blocks) h = b(h, memory, ctx);
    return log_softmax_last(out(final_norm(h)));
  }
};

/// Targets for teacher forcing: tokens followed by <eos>.
inline std::vector<std::size_t> aed_targets(const std::vector<int>& tokens, std::size_t eos) {
  std::vector<std::size_t> t(tokens.begin(), tokens.end());
  t.push_back(eos);
  return t;
}

/// Mean over positions of the label-smoothed cross entropy
///   -(1 - eps) * lp[target] - (eps / V) * sum_v lp[v].
inline Tensor aed_loss(const Tensor& logprobs, const std::vector<std::size_t>& targets, double smoothing = 0.0) {
  if (logprobs.rows() != targets.size()) {
    throw ShapeError("aed_loss", "expected " + std::to_string(targets.size()) + " rows, got " +
                                     shape_str(logprobs.shape()));
  }
  const double v = static_cast<double>(logprobs.cols());
  Tensor per_pos = scale(pick(logprobs, targets), -(1.0 - smoothing));
  if (smoothing > 0.0) per_pos = add(per_pos, scale(sum_last(logprobs), -smoothing / v));
  return mean(per_pos);
}

/// Plain sum of the per-level losses.
inline Tensor multi_level_aed(const std::vector<Tensor>& level_losses) {
  if (level_losses.empty()) throw std::invalid_argument("multi_level_aed: no levels");
  Tensor total = level_losses[0];
  for (std::size_t i = 1; i < level_losses.size(); ++i) total = add(total, level_losses[i]);
  return total;
}

/// log P(tokens + <eos> | memory) under teacher forcing.
inline double rescore(const TransformerDecoder& dec, const Tensor& memory, const std::vector<int>& tokens) {
  NoGradGuard ng;
  ForwardContext ctx;
  const Tensor lp = dec.teacher_forced(memory, tokens, ctx);
  const auto targets = aed_targets(tokens, dec.config.sos_eos());
  double s = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) s += lp(t, targets[t]);
  return s;
}

}  // namespace m3asr
