#include <gtest/gtest.h>

#include "m3asr/inference.hpp"

using namespace m3asr;

namespace {

// Textbook Levenshtein distance, recursive with memo.
std::size_t lev(const std::vector<int>& a, const std::vector<int>& b, std::size_t i, std::size_t j,
                std::vector<std::vector<long>>& memo) {
  if (i == 0) return j;
  if (j == 0) return i;
  long& m = memo[i][j];
  if (m >= 0) return static_cast<std::size_t>(m);
  const std::size_t sub = lev(a, b, i - 1, j - 1, memo) + (a[i - 1] != b[j - 1]);
  const std::size_t del = lev(a, b, i - 1, j, memo) + 1;
  const std::size_t ins = lev(a, b, i, j - 1, memo) + 1;
  m = static_cast<long>(std::min({sub, del, ins}));
  return static_cast<std::size_t>(m);
}

std::size_t lev(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<long>> memo(a.size() + 1, std::vector<long>(b.size() + 1, -1));
  return lev(a, b, a.size(), b.size(), memo);
}

ModelConfig small_model(std::size_t experts, std::size_t levels = 3) {
  ModelConfig c;
  c.input_dim = 16;
  c.vocab_size = 5;
  c.encoder.num_blocks = 3;
  c.encoder.d_att = 8;
  c.encoder.d_ff = 16;
  c.encoder.heads = 2;
  c.encoder.kernel = 3;
  c.encoder.subsample_channels = 2;
  c.num_experts = experts;
  c.num_levels = levels;
  c.decoder_blocks = 1;
  return c;
}

std::vector<Hypothesis> random_nbest(Rng& rng, std::size_t n) {
  std::vector<Hypothesis> v(n);
  double ctc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ctc -= uniform_real(rng, 0.0, 2.0);
    v[i].tokens = {static_cast<int>(i)};
    v[i].ctc_score = ctc;
    v[i].aed_score = -uniform_real(rng, 0.0, 10.0);
  }
  return v;
}

}  // namespace

TEST(EditDistance, Examples) {
  const auto c = edit_distance({1, 2, 3}, {1, 9, 3});
  EXPECT_EQ(c.substitutions, 1u);
  EXPECT_EQ(c.total(), 1u);
  EXPECT_EQ(edit_distance({1, 2, 3}, {}).deletions, 3u);
  EXPECT_EQ(edit_distance({}, {4, 4}).insertions, 2u);
  EXPECT_EQ(edit_distance({1, 2}, {1, 2}).total(), 0u);
}

TEST(EditDistance, MatchesRecursiveOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> a, b;
    const auto la = uniform_int(rng, 0, 8), lb = uniform_int(rng, 0, 8);
    for (std::int64_t i = 0; i < la; ++i) a.push_back(static_cast<int>(uniform_int(rng, 0, 3)));
    for (std::int64_t i = 0; i < lb; ++i) b.push_back(static_cast<int>(uniform_int(rng, 0, 3)));
    const auto c = edit_distance(a, b);
    EXPECT_EQ(c.total(), lev(a, b));
    // Every alignment accounts for the length difference.
    EXPECT_EQ(static_cast<long>(c.deletions) - static_cast<long>(c.insertions),
              static_cast<long>(a.size()) - static_cast<long>(b.size()));
  }
}

TEST(ScoreCorpus, Examples) {
  const auto perfect = score_corpus({score_utterance("a", {1, 2}, {1, 2}), score_utterance("b", {3}, {3})});
  EXPECT_EQ(perfect.cer, 0.0);
  const auto third = score_corpus({score_utterance("a", {1, 2, 3}, {1, 7, 3})});
  EXPECT_NEAR(third.cer, 1.0 / 3.0, 1e-15);
}

TEST(ScoreCorpus, PoolsErrorsAndExcludesEmptyReferences) {
  const auto s = score_corpus({score_utterance("a", {1, 2, 3, 4}, {1}), score_utterance("b", {}, {5}),
                               score_utterance("c", {1}, {1})});
  EXPECT_EQ(s.errors, 3u);
  EXPECT_EQ(s.ref_tokens, 5u);
  EXPECT_NEAR(s.cer, 0.6, 1e-15);
  EXPECT_EQ(s.excluded, (std::vector<std::string>{"b"}));
  EXPECT_THROW(score_corpus({score_utterance("x", {}, {})}), std::invalid_argument);
  const std::string table = format_score_table(s);
  EXPECT_NE(table.find("TOTAL"), std::string::npos);
  EXPECT_EQ(table.find(" b "), std::string::npos);
}

TEST(Rerank, Limits) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    auto nbest = random_nbest(rng, 8);
    std::size_t best_aed = 0;
    for (std::size_t i = 1; i < 8; ++i)
      if (nbest[i].aed_score > nbest[best_aed].aed_score) best_aed = i;
    EXPECT_EQ(rerank(nbest, 0.0), best_aed);
    EXPECT_EQ(rerank(nbest, 1e9), 0u);
    auto one = std::vector<Hypothesis>{nbest[3]};
    EXPECT_EQ(rerank(one, 0.5), 0u);
  }
  std::vector<Hypothesis> none;
  EXPECT_THROW(rerank(none, 0.5), std::invalid_argument);
}

TEST(Rerank, CombinedScore) {
  std::vector<Hypothesis> h(2);
  h[0].ctc_score = -1.0;
  h[0].aed_score = -4.0;
  h[1].ctc_score = -3.0;
  h[1].aed_score = -2.0;
  EXPECT_EQ(rerank(h, 0.5), 1u);
  EXPECT_EQ(h[0].combined, -4.5);
  EXPECT_EQ(h[1].combined, -3.5);
  EXPECT_EQ(rerank(h, 2.0), 0u);
  // Equal combined scores keep the better CTC rank.
  EXPECT_EQ(rerank(h, 1.0), 0u);
}

TEST(Decode, DeterministicAndDrawnFromNBest) {
  const Model m(small_model(2), 3);
  Rng rng(9);
  for (int u = 0; u < 5; ++u) {
    const Tensor feats = random_uniform({30 + static_cast<std::size_t>(u) * 7, 16}, rng);
    DecodeOptions opt;
    opt.beam = 6;
    opt.nbest = 4;
    const DecodeResult a = decode_utterance(m, feats, opt), b = decode_utterance(m, feats, opt);
    EXPECT_EQ(a.best.tokens, b.best.tokens);
    EXPECT_EQ(a.best.combined, b.best.combined);
    bool found = false;
    for (const auto& h : a.nbest) found |= h.tokens == a.best.tokens;
    EXPECT_TRUE(found);
    for (const auto& h : a.nbest) {
      EXPECT_NEAR(h.combined, h.aed_score + 0.5 * h.ctc_score, 1e-12);
      for (int t : h.tokens) EXPECT_TRUE(t >= 0 && t < 5);
    }
  }
}

TEST(Decode, NBestOfOneIsCtcTopOne) {
  const Model m(small_model(2), 5);
  Rng rng(10);
  const Tensor feats = random_uniform({40, 16}, rng);
  DecodeOptions opt;
  opt.nbest = 1;
  const DecodeResult r = decode_utterance(m, feats, opt);
  ASSERT_EQ(r.nbest.size(), 1u);
  EXPECT_EQ(r.best.tokens, r.nbest[0].tokens);
}

TEST(Decode, StrippingAuxiliaryDecodersChangesNothing) {
  const Model m(small_model(2), 6);
  const Model s = strip_auxiliary_decoders(m);
  Rng rng(11);
  std::vector<FeatureSequence> data;
  for (int u = 0; u < 4; ++u) {
    FeatureSequence f;
    f.utt_id = "u" + std::to_string(u);
    f.feats = FeatureMatrix(36, 16);
    for (double& v : f.feats.values) v = uniform_real(rng, -1.0, 1.0);
    data.push_back(f);
  }
  const auto a = decode_corpus(m, data), b = decode_corpus(s, data);
  for (std::size_t i = 0; i < data.size(); ++i)
    EXPECT_EQ(hypothesis_json(a[i].utt_id, a[i].best).dump(), hypothesis_json(b[i].utt_id, b[i].best).dump());
  const CostReport ca = cost_report(m.config()), cb = cost_report(s.config());
  EXPECT_EQ(ca.flops, cb.flops);
  EXPECT_EQ(ca.components, cb.components);
  EXPECT_EQ(ca.inference_params, cb.inference_params);
  EXPECT_GT(ca.params, cb.params);
}

TEST(Decode, ParallelMatchesSerial) {
  const Model m(small_model(2), 7);
  Rng rng(12);
  std::vector<FeatureSequence> data(5);
  for (std::size_t u = 0; u < data.size(); ++u) {
    data[u].utt_id = "u" + std::to_string(u);
    data[u].feats = FeatureMatrix(30, 16);
    for (double& v : data[u].feats.values) v = uniform_real(rng, -1.0, 1.0);
  }
  const auto a = decode_corpus(m, data, {}, 1), b = decode_corpus(m, data, {}, 3);
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(a[i].utt_id, b[i].utt_id);
    EXPECT_EQ(a[i].best.tokens, b[i].best.tokens);
    EXPECT_EQ(a[i].best.combined, b[i].best.combined);
  }
}

TEST(CostReport, FlopsConstantInExperts) {
  const ModelConfig base = reference_config(Preset::k3M16);
  std::vector<CostReport> r;
  for (std::size_t n : {1u, 2u, 16u, 32u, 64u}) {
    ModelConfig c = base;
    c.num_experts = n;
    r.push_back(cost_report(c));
  }
  for (const auto& x : r) EXPECT_EQ(x.flops, r[0].flops);
  for (std::size_t i = 1; i < r.size(); ++i) {
    EXPECT_GT(r[i].params, r[i - 1].params);
    EXPECT_GT(r[i].flops_with_router, r[i - 1].flops_with_router);
  }
}

TEST(CostReport, OneMoreExpertAddsOneFfnPerLayer) {
  const ModelConfig base = reference_config(Preset::k3M16);
  const std::size_t d = base.encoder.d_att, ff = base.resolved_expert_ff();
  const std::size_t router_column = base.resolved_embed_dim() + d;
  const std::size_t expert = d * ff + ff + ff * d + d;
  for (std::size_t n : {1u, 16u, 32u}) {
    ModelConfig a = base, b = base;
    a.num_experts = n;
    b.num_experts = n + 1;
    EXPECT_EQ(cost_report(b).params - cost_report(a).params, base.encoder.num_blocks * (expert + router_column));
  }
}

TEST(CostReport, ReferenceScaleWithinTolerance) {
  const std::vector<std::pair<Preset, double>> table{
      {Preset::kConformer, 120e6}, {Preset::kConformerMoE16, 425e6}, {Preset::k3M16, 500e6}};
  for (const auto& [p, target] : table) {
    const double params = static_cast<double>(cost_report(reference_config(p)).params);
    EXPECT_NEAR(params / target, 1.0, 0.15) << params;
  }
}

TEST(CostReport, ReferenceScaleFlopsMatchAcrossExpertCounts) {
  const double f16 = cost_report(reference_config(Preset::k3M16)).flops;
  EXPECT_EQ(cost_report(reference_config(Preset::k3M32)).flops, f16);
  EXPECT_EQ(cost_report(reference_config(Preset::k3M64)).flops, f16);
  EXPECT_EQ(cost_report(reference_config(Preset::kConformerMoE16)).flops, f16);
  EXPECT_LT(cost_report(reference_config(Preset::kConformer)).flops, f16);
}

TEST(CostReport, ComponentsSumAndFrames) {
  const CostReport r = cost_report(small_model(4));
  EXPECT_EQ(r.encoder_frames, 24u);
  double all = 0.0;
  for (const auto& [k, v] : r.components) all += v;
  EXPECT_EQ(r.flops_with_router, all);
  EXPECT_EQ(r.flops, all - r.components.at("router"));
  const CostReport dense = cost_report(small_model(0));
  EXPECT_EQ(dense.components.at("router"), 0.0);
  EXPECT_EQ(dense.components.at("moe_expert"), 0.0);
}

TEST(CostReport, LinearLayerConvention) {
  const detail::FlopCounter f{10.0};
  EXPECT_EQ(f.linear(4, 3), 10.0 * (2 * 4 * 3 + 3));
  EXPECT_EQ(f.norm(8), 10.0 * 5 * 8);
}

TEST(CostReport, TableLayout) {
  std::vector<CostReport> rs;
  for (const auto& [name, p] : reference_presets()) rs.push_back(cost_report(reference_config(p), name));
  const std::string t = format_cost_table(rs);
  EXPECT_NE(t.find("3M (64e)"), std::string::npos);
  EXPECT_NE(t.find("Params"), std::string::npos);
  EXPECT_EQ(human_count(1.39e9), "1.39B");
  EXPECT_EQ(human_count(133.3e6), "133.3M");
}
