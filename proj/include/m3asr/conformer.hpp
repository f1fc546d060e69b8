#pragma once

// Conformer encoder.
//
//   x_hat   = x + 1/2 FFN(x)
//   x_tilde = x_hat + MHSA(x_hat)
//   x_bar   = x_tilde + Conv(x_tilde)
//   y       = LN(x_bar + 1/2 FFN(x_bar))
//
// The second FFN may be replaced by a top-1 MoE layer, in which case the block
// also needs the shared embedding e_c for its router.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "m3asr/moe.hpp"
#include "m3asr/nn.hpp"

namespace m3asr {

struct ConformerConfig {
  std::size_t num_blocks = 6;
  std::size_t d_att = 64;
  std::size_t d_ff = 128;
  std::size_t heads = 4;
  std::size_t kernel = 7;
  double dropout = 0.1;
  std::size_t subsample_channels = 16;

  void validate() const {
    if (d_att == 0 || heads == 0 || d_att % heads != 0)
      throw std::invalid_argument("conformer: d_att must be a positive multiple of heads");
    if (kernel % 2 == 0) throw std::invalid_argument("conformer: kernel size must be odd");
    if (d_ff == 0 || subsample_channels == 0) throw std::invalid_argument("conformer: zero width");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("conformer: dropout must be in [0, 1)");
  }
};

inline constexpr std::size_t kMinSubsampleFrames = 7;

/// Output length of two kernel-3 stride-2 convolutions.
constexpr std::size_t subsampled_length(std::size_t t) {
  if (t < kMinSubsampleFrames) return 0;
  return ((t - 1) / 2 - 1) / 2;
}

// ---------------------------------------------------------------------------

/// Two 3x3 stride-2 convolutions over (time, frequency), ReLU after each, then a
/// linear projection of the flattened channels x frequency to d_att.
struct Subsampler {
  Tensor conv1_w, conv1_b, conv2_w, conv2_b;
  Linear out;
  std::size_t channels = 0;
  std::size_t input_dim = 0;

  static void declare(Manifest& m, const std::string& prefix, std::size_t input_dim, std::size_t channels,
                      std::size_t d_att) {
    if (input_dim < kMinSubsampleFrames) throw std::invalid_argument("subsample: input dimension below 7");
    const std::size_t f2 = subsampled_length(input_dim);
    m.push_back({join(prefix, "conv1.weight"), {9, channels}, Init::kUniform, 1.0 / 3.0, {}});
    m.push_back({join(prefix, "conv1.bias"), {channels}, Init::kZeros, 0.0, {}});
    m.push_back({join(prefix, "conv2.weight"), {9 * channels, channels}, Init::kUniform,
                 1.0 / std::sqrt(9.0 * static_cast<double>(channels)), {}});
    m.push_back({join(prefix, "conv2.bias"), {channels}, Init::kZeros, 0.0, {}});
    Linear::declare(m, join(prefix, "out"), channels * f2, d_att);
  }

  static Subsampler bind(const ParamStore& s, const std::string& prefix, std::size_t input_dim) {
    Subsampler sub;
    sub.conv1_w = s.get(join(prefix, "conv1.weight"));
    sub.conv1_b = s.get(join(prefix, "conv1.bias"));
    sub.conv2_w = s.get(join(prefix, "conv2.weight"));
    sub.conv2_b = s.get(join(prefix, "conv2.bias"));
    sub.out = Linear::bind(s, join(prefix, "out"));
    sub.channels = sub.conv1_w.dim(1);
    sub.input_dim = input_dim;
    return sub;
  }

  /// feats [T x D] -> [T' x d_att], T' = floor((floor((T-1)/2)-1)/2).
  Tensor operator()(const Tensor& feats) const {
    const std::size_t t_len = feats.rows(), d = feats.cols();
    if (t_len < kMinSubsampleFrames) {
      throw ShapeError("subsample", "need at least " + std::to_string(kMinSubsampleFrames) + " frames, got " +
                                        std::to_string(t_len));
    }
    if (d != input_dim) throw ShapeError("subsample", "expected feature dim " + std::to_string(input_dim));
    const std::size_t t1 = (t_len - 3) / 2 + 1, d1 = (d - 3) / 2 + 1;
    const std::size_t t2 = (t1 - 3) / 2 + 1, d2 = (d1 - 3) / 2 + 1;
    Tensor h = reshape(feats, {t_len * d, 1});
    h = relu(add(matmul(unfold2d(h, t_len, d, 3, 2), conv1_w), conv1_b));
    h = relu(add(matmul(unfold2d(h, t1, d1, 3, 2), conv2_w), conv2_b));
    return out(reshape(h, {t2, d2 * channels}));
  }
};

/// Pointwise conv -> GLU -> depthwise conv -> layernorm -> swish -> pointwise conv.
struct ConvModule {
  LayerNorm norm;
  Linear pw1;
  Tensor dw_kernel;  // [K x d]
  Tensor dw_bias;    // [d]
  LayerNorm dw_norm;
  Linear pw2;

  static void declare(Manifest& m, const std::string& prefix, std::size_t d, std::size_t kernel) {
    LayerNorm::declare(m, join(prefix, "norm"), d);
    Linear::declare(m, join(prefix, "pw1"), d, 2 * d);
    m.push_back({join(prefix, "dw.weight"), {kernel, d}, Init::kUniform,
                 1.0 / std::sqrt(static_cast<double>(kernel)), {}});
    m.push_back({join(prefix, "dw.bias"), {d}, Init::kZeros, 0.0, {}});
    LayerNorm::declare(m, join(prefix, "dw_norm"), d);
    Linear::declare(m, join(prefix, "pw2"), d, d);
  }

  static ConvModule bind(const ParamStore& s, const std::string& prefix) {
    return {LayerNorm::bind(s, join(prefix, "norm")), Linear::bind(s, join(prefix, "pw1")),
            s.get(join(prefix, "dw.weight")),         s.get(join(prefix, "dw.bias")),
            LayerNorm::bind(s, join(prefix, "dw_norm")), Linear::bind(s, join(prefix, "pw2"))};
  }

  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const {
    Tensor h = glu(pointwise_conv1d(norm(x), pw1.weight, pw1.bias));
    h = add(depthwise_conv1d(h, dw_kernel), dw_bias);
    h = swish(dw_norm(h));
    return ctx.drop(pointwise_conv1d(h, pw2.weight, pw2.bias));
  }
};

/// Pre-norm self-attention module.
struct SelfAttentionModule {
  LayerNorm norm;
  MultiHeadAttention mha;

  static void declare(Manifest& m, const std::string& prefix, std::size_t d) {
    LayerNorm::declare(m, join(prefix, "norm"), d);
    MultiHeadAttention::declare(m, join(prefix, "mha"), d);
  }

  static SelfAttentionModule bind(const ParamStore& s, const std::string& prefix, std::size_t heads) {
    return {LayerNorm::bind(s, join(prefix, "norm")), MultiHeadAttention::bind(s, join(prefix, "mha"), heads)};
  }

  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const {
    const Tensor h = norm(x);
    return ctx.drop(mha(h, h, false, ctx));
  }
};

/// Intermediate values of one block, for structural checks.
struct BlockTrace {
  Tensor x_hat, x_tilde, x_bar, y;
};

struct ConformerBlock {
  FeedForward ffn1;
  SelfAttentionModule mhsa;
  ConvModule conv;
  std::optional<FeedForward> ffn2;  // dense variant
  std::optional<MoELayer> moe;      // MoE variant
  LayerNorm final_norm;

  /// n_experts == 0 declares the dense block.
  static void declare(Manifest& m, const std::string& prefix, const ConformerConfig& c, std::size_t n_experts = 0,
                      std::size_t d_emb = 0, std::size_t expert_ff = 0, bool identical_init = false) {
    FeedForward::declare(m, join(prefix, "ffn1"), c.d_att, c.d_ff);
    SelfAttentionModule::declare(m, join(prefix, "mhsa"), c.d_att);
    ConvModule::declare(m, join(prefix, "conv"), c.d_att, c.kernel);
    if (n_experts == 0) {
      FeedForward::declare(m, join(prefix, "ffn2"), c.d_att, c.d_ff);
    } else {
      MoELayer::declare(m, join(prefix, "ffn2"), c.d_att, d_emb, expert_ff ? expert_ff : c.d_ff, n_experts,
                        identical_init);
    }
    LayerNorm::declare(m, join(prefix, "final_norm"), c.d_att);
  }

  static ConformerBlock bind(const ParamStore& s, const std::string& prefix, std::size_t heads) {
    ConformerBlock b;
    b.ffn1 = FeedForward::bind(s, join(prefix, "ffn1"));
    b.mhsa = SelfAttentionModule::bind(s, join(prefix, "mhsa"), heads);
    b.conv = ConvModule::bind(s, join(prefix, "conv"));
    if (s.contains(join(prefix, "ffn2.router"))) {
      b.moe = MoELayer::bind(s, join(prefix, "ffn2"));
    } else {
      b.ffn2 = FeedForward::bind(s, join(prefix, "ffn2"));
    }
    b.final_norm = LayerNorm::bind(s, join(prefix, "final_norm"));
    return b;
  }

  bool is_moe() const { return moe.has_value(); }

  Tensor operator()(const Tensor& x, const ForwardContext& ctx, const Tensor* e_c = nullptr,
                    RoutingRecord* record = nullptr, const std::vector<std::size_t>* frozen = nullptr,
                    BlockTrace* trace = nullptr) const {
    const Tensor x_hat = add(x, scale(ffn1(x, ctx), 0.5));
    const Tensor x_tilde = add(x_hat, mhsa(x_hat, ctx));
    const Tensor x_bar = add(x_tilde, conv(x_tilde, ctx));
    Tensor second;
    if (moe) {
      if (!e_c) throw std::invalid_argument("conformer block: MoE layer needs the shared embedding");
      second = moe_forward(x_bar, *e_c, *moe, ctx, record, frozen);
    } else {
      second = (*ffn2)(x_bar, ctx);
    }
    const Tensor y = final_norm(add(x_bar, scale(second, 0.5)));
    if (trace) *trace = {x_hat, x_tilde, x_bar, y};
    return y;
  }
};

/// Block indices (1-based, counted from the subsampler) whose outputs feed the
/// auxiliary decoders: floor(j * N / K) for j = 1..K-1.
inline std::vector<std::size_t> tap_blocks(std::size_t num_blocks, std::size_t num_levels) {
  std::vector<std::size_t> taps;
  for (std::size_t j = 1; j < num_levels; ++j) {
    const std::size_t b = j * num_blocks / num_levels;
    if (b == 0 || (!taps.empty() && taps.back() == b)) {
      throw std::invalid_argument("encoder with " + std::to_string(num_blocks) + " blocks cannot host " +
                                  std::to_string(num_levels) + " decoder levels");
    }
    taps.push_back(b);
  }
  return taps;
}

struct EncoderOutput {
  Tensor final;                         // [T' x d_att]
  std::map<std::size_t, Tensor> taps;   // block index -> [T' x d_att]
  std::vector<RoutingRecord> routing;   // one per MoE block, in block order
};

/// Stack of blocks behind a subsampler and absolute positional encodings.
struct ConformerStack {
  Subsampler subsample;
  std::vector<ConformerBlock> blocks;
  std::size_t d_att = 0;

  static void declare(Manifest& m, const std::string& prefix, std::size_t input_dim, const ConformerConfig& c,
                      std::size_t n_experts = 0, std::size_t d_emb = 0, std::size_t expert_ff = 0,
                      bool identical_init = false) {
    c.validate();
    Subsampler::declare(m, join(prefix, "subsample"), input_dim, c.subsample_channels, c.d_att);
    for (std::size_t b = 0; b < c.num_blocks; ++b) {
      ConformerBlock::declare(m, join(prefix, "blocks." + std::to_string(b)), c, n_experts, d_emb, expert_ff,
                              identical_init);
    }
  }

  static ConformerStack bind(const ParamStore& s, const std::string& prefix, std::size_t input_dim,
                             const ConformerConfig& c) {
    ConformerStack st;
    st.subsample = Subsampler::bind(s, join(prefix, "subsample"), input_dim);
    for (std::size_t b = 0; b < c.num_blocks; ++b) {
      st.blocks.push_back(ConformerBlock::bind(s, join(prefix, "blocks." + std::to_string(b)), c.heads));
    }
    st.d_att = c.d_att;
    return st;
  }

  /// Subsample, add positions, run every block. Taps listed in tap_at are
  /// recorded as pure reads of the block outputs.
  EncoderOutput operator()(const Tensor& feats, const ForwardContext& ctx, const Tensor* e_c = nullptr,
                           const std::vector<std::size_t>& tap_at = {},
                           const std::vector<std::vector<std::size_t>>* frozen = nullptr) const {
    EncoderOutput out;
    Tensor h = subsample(feats);
    h = ctx.drop(add(h, sinusoidal_positions(h.rows(), d_att)));
    std::size_t moe_index = 0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].is_moe()) {
        const std::vector<std::size_t>* fz = nullptr;
        if (frozen) {
          if (moe_index >= frozen->size()) throw std::invalid_argument("encoder: missing frozen route");
          fz = &(*frozen)[moe_index];
        }
        RoutingRecord rec;
        h = blocks[b](h, ctx, e_c, &rec, fz);
        out.routing.push_back(std::move(rec));
        ++moe_index;
      } else {
        h = blocks[b](h, ctx);
      }
      if (std::find(tap_at.begin(), tap_at.end(), b + 1) != tap_at.end()) out.taps[b + 1] = h;
    }
    out.final = h;
    return out;
  }
};

}  // namespace m3asr
