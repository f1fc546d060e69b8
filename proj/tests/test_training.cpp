#include <gtest/gtest.h>

#include <cmath>

#include "m3asr/checkpoint.hpp"
#include "m3asr/training.hpp"

using namespace m3asr;

namespace {

ModelConfig tiny_model(std::size_t experts = 2) {
  ModelConfig c;
  c.input_dim = 16;
  c.vocab_size = 4;
  c.encoder.num_blocks = 3;
  c.encoder.d_att = 8;
  c.encoder.d_ff = 16;
  c.encoder.heads = 2;
  c.encoder.kernel = 3;
  c.encoder.subsample_channels = 2;
  c.encoder.dropout = 0.1;
  c.num_experts = experts;
  c.decoder_blocks = 1;
  return c;
}

std::vector<FeatureSequence> tiny_corpus(std::size_t n = 6, std::size_t dims = 16, int vocab = 4) {
  SyntheticCorpusConfig sc;
  sc.num_utts = n;
  sc.dims = dims;
  sc.vocab_size = vocab;
  sc.min_token_frames = 6;
  sc.max_token_frames = 8;
  auto corpus = synthesize_corpus(sc);
  std::vector<FeatureMatrix> mats;
  for (const auto& s : corpus) mats.push_back(s.feats);
  const CmvnStats st = compute_cmvn(mats);
  for (auto& s : corpus) s = apply_cmvn(s, st);
  return corpus;
}

TrainConfig quick_train() {
  TrainConfig t;
  t.batch_size = 2;
  t.warmup_steps = 10;
  t.lr = 1e-3;
  t.augment.max_freq_width = 4;
  t.augment.max_time_width = 5;
  return t;
}

std::vector<const FeatureSequence*> ptrs(const std::vector<FeatureSequence>& v, std::size_t begin, std::size_t end) {
  std::vector<const FeatureSequence*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&v[i]);
  return out;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("m3asr_train_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(JointLoss, Examples) {
  const Tensor lc = Tensor::scalar(10.0);
  const std::vector<Tensor> la{Tensor::scalar(2.0), Tensor::scalar(2.0), Tensor::scalar(2.0)};
  EXPECT_NEAR(joint_loss(lc, la, 0.3).item(), 7.2, 1e-12);
  EXPECT_EQ(joint_loss(lc, la, 1.0).item(), 10.0);
  EXPECT_EQ(joint_loss(lc, la, 0.0).item(), 6.0);
}

TEST(TotalLoss, Examples) {
  const Tensor joint = Tensor::scalar(7.2);
  const Tensor zero_moe = moe_loss(Tensor::scalar(2.0), Tensor::scalar(1.0), Tensor::scalar(10.0), {0.0, 0.0, 0.0});
  EXPECT_EQ(total_loss(zero_moe, joint).item(), 7.2);
  EXPECT_EQ(total_loss(Tensor::scalar(0.0), Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_NEAR(total_loss(Tensor::scalar(0.55), Tensor::scalar(3.25)).item(), 3.8, 1e-12);
}

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig t;
  EXPECT_EQ(t.alpha, 0.15);
  EXPECT_EQ(t.beta, 0.15);
  EXPECT_EQ(t.gamma, 0.01);
  EXPECT_EQ(t.eta, 0.3);
  EXPECT_EQ(t.max_epochs, 26u);
  TrainConfig bad;
  bad.eta = 1.5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = {};
  bad.beta = -0.1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig t;
  t.alpha = 0.2;
  t.lr = 5e-4;
  t.augment.max_time_width = 7;
  t.spec_augment = false;
  const TrainConfig back = nlohmann::json(t).get<TrainConfig>();
  EXPECT_EQ(back.alpha, 0.2);
  EXPECT_EQ(back.lr, 5e-4);
  EXPECT_EQ(back.augment.max_time_width, 7u);
  EXPECT_FALSE(back.spec_augment);
}

TEST(Schedule, WarmupThenInverseSqrt) {
  EXPECT_NEAR(warmup_lr(1.0, 1, 100), 0.01, 1e-15);
  EXPECT_NEAR(warmup_lr(1.0, 50, 100), 0.5, 1e-15);
  EXPECT_NEAR(warmup_lr(1.0, 100, 100), 1.0, 1e-15);
  EXPECT_NEAR(warmup_lr(1.0, 400, 100), 0.5, 1e-15);
  EXPECT_EQ(warmup_lr(0.0, 10, 100), 0.0);
}

TEST(Clip, PreservesDirection) {
  Tensor a = Tensor({3}, {0.0, 0.0, 0.0}, true), b = Tensor({2}, {0.0, 0.0}, true);
  backward(add(sum(mul(a, Tensor({3}, {3.0, -4.0, 12.0}))), sum(mul(b, Tensor({2}, {0.0, 0.0})))));
  std::vector<Tensor> params{a, b};
  const std::vector<double> before(a.grad().begin(), a.grad().end());
  EXPECT_NEAR(clip_grad_norm(params, 1.0), 13.0, 1e-12);
  EXPECT_NEAR(global_grad_norm(params), 1.0, 1e-12);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.grad()[i], before[i] / 13.0, 1e-15);
  EXPECT_NEAR(clip_grad_norm(params, 5.0), 1.0, 1e-12);
  EXPECT_NEAR(global_grad_norm(params), 1.0, 1e-12);
}

TEST(Adam, ZeroLearningRateLeavesParams) {
  Tensor w = Tensor({2}, {1.0, -2.0}, true);
  backward(sum(mul(w, w)));
  Adam opt({w});
  opt.step(0.0);
  EXPECT_EQ(w[0], 1.0);
  EXPECT_EQ(w[1], -2.0);
  opt.step(0.1);
  // First bias-corrected Adam step moves each coordinate by lr against its sign.
  EXPECT_NEAR(w[0], 0.9, 1e-6);
}

TEST(SelectFinal, Examples) {
  const std::vector<CheckpointRecord> r{{1, 10, 3.1, {}}, {2, 20, 2.7, {}}, {3, 30, 2.9, {}}};
  EXPECT_EQ(select_final(r).epoch, 2u);
  EXPECT_EQ(select_final({{5, 1, 1.0, {}}}).epoch, 5u);
  EXPECT_EQ(select_final({{1, 1, 2.0, {}}, {2, 2, 2.0, {}}}).epoch, 1u);
  EXPECT_EQ(select_final({{4, 1, 2.0, {}}, {2, 2, 2.0, {}}}).epoch, 2u);
  EXPECT_THROW(select_final({}), std::invalid_argument);
}

TEST(BatchObjective, MatchesIndependentComponents) {
  const Model model(tiny_model(3), 5);
  const auto data = tiny_corpus(3);
  TrainConfig cfg = quick_train();
  ForwardContext ctx;
  const auto batch = ptrs(data, 0, 3);
  const BatchObjective obj = batch_objective(model, batch, cfg, ctx, ctx);

  double joint = 0.0, lc = 0.0, la = 0.0, le = 0.0;
  std::vector<std::vector<Tensor>> probs;
  for (const auto* s : batch) {
    const UtteranceLosses l = model.losses(s->feats.to_tensor(), s->tokens, ctx, cfg.label_smoothing);
    double a = 0.0;
    for (const auto& t : l.aed) a += t.item();
    joint += cfg.eta * l.ctc.item() + (1.0 - cfg.eta) * a + cfg.gamma * l.embed_ctc.item();
    lc += l.ctc.item();
    la += a;
    le += l.embed_ctc.item();
    probs.resize(l.routing.size());
    for (std::size_t k = 0; k < l.routing.size(); ++k) probs[k].push_back(l.routing[k].probs);
  }
  double ls = 0.0, lm = 0.0;
  for (const auto& layer : probs) {
    std::size_t frames = 0;
    std::vector<double> col(3, 0.0);
    double sp = 0.0;
    for (const auto& p : layer)
      for (std::size_t r = 0; r < p.rows(); ++r, ++frames) {
        double l1 = 0.0, l2 = 0.0;
        for (std::size_t e = 0; e < 3; ++e) {
          l1 += p(r, e);
          l2 += p(r, e) * p(r, e);
          col[e] += p(r, e);
        }
        sp += l1 / std::sqrt(l2);
      }
    ls += sp / static_cast<double>(frames);
    double m = 0.0;
    for (double c : col) m += (c / static_cast<double>(frames)) * (c / static_cast<double>(frames));
    lm += 3.0 * m;
  }
  ls /= static_cast<double>(probs.size());
  lm /= static_cast<double>(probs.size());
  EXPECT_NEAR(obj.ctc.item(), lc / 3.0, 1e-12);
  EXPECT_NEAR(obj.aed_sum.item(), la / 3.0, 1e-12);
  EXPECT_NEAR(obj.embed_ctc.item(), le / 3.0, 1e-12);
  EXPECT_NEAR(obj.sparsity.item(), ls, 1e-12);
  EXPECT_NEAR(obj.importance.item(), lm, 1e-12);
  EXPECT_NEAR(obj.total.item(), joint / 3.0 + cfg.alpha * ls + cfg.beta * lm, 1e-12);
}

TEST(Trainer, SameSeedSameMetrics) {
  const auto data = tiny_corpus(4);
  auto run = [&] {
    Model m(tiny_model(), 9);
    Trainer t(m, quick_train());
    std::vector<std::string> out;
    for (std::size_t s = 0; s < 4; ++s) out.push_back(nlohmann::json(t.step(ptrs(data, s % 2 * 2, s % 2 * 2 + 2))).dump());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, ZeroLearningRateKeepsParameters) {
  const auto data = tiny_corpus(2);
  Model m(tiny_model(), 2);
  const Model before = m;
  TrainConfig cfg = quick_train();
  cfg.lr = 0.0;
  Trainer t(m, cfg);
  t.step(ptrs(data, 0, 2));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto a = m.params().entries()[i].second.data(), b = before.params().entries()[i].second.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << m.params().entries()[i].first;
  }
}

TEST(Trainer, JointTrainingUpdatesEmbedding) {
  const auto data = tiny_corpus(2);
  Model m(tiny_model(), 3);
  const Model before = m;
  Trainer t(m, quick_train());
  t.step(ptrs(data, 0, 2));
  double delta = 0.0;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& [name, now] = m.params().entries()[i];
    if (name.rfind("embed.", 0) != 0) continue;
    const Tensor& old = before.params().entries()[i].second;
    for (std::size_t k = 0; k < now.size(); ++k) delta += std::abs(now[k] - old[k]);
  }
  EXPECT_GT(delta, 0.0);
}

TEST(Trainer, MetricsCarryAllComponents) {
  const auto data = tiny_corpus(2);
  Model m(tiny_model(2), 4);
  Trainer t(m, quick_train());
  const StepMetrics s = t.step(ptrs(data, 0, 2), 1);
  const nlohmann::json j = s;
  for (const char* k : {"step", "epoch", "L", "L_c", "sum_L_a", "L_s", "L_m", "L_e", "grad_norm", "lr", "entropy",
                        "layer_entropy"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(s.layer_entropy.size(), 3u);
  EXPECT_GE(s.sparsity, 1.0);
  EXPECT_LE(s.sparsity, std::sqrt(2.0) + 1e-12);
  EXPECT_GE(s.importance, 1.0);
  EXPECT_NEAR(s.aed_weighted, 0.7 * s.aed_sum, 1e-12);
}

TEST(Trainer, NonFiniteLossAborts) {
  auto data = tiny_corpus(1);
  data[0].feats.values[3] = std::nan("");
  Model m(tiny_model(), 4);
  TrainConfig cfg = quick_train();
  cfg.spec_augment = false;
  Trainer t(m, cfg);
  EXPECT_THROW(t.step(ptrs(data, 0, 1)), NonFiniteLoss);
}

TEST(Trainer, SingleUtteranceOverfit) {
  ModelConfig mc;
  mc.encoder.dropout = 0.0;
  SyntheticCorpusConfig sc;
  sc.num_utts = 1;
  auto data = synthesize_corpus(sc);
  data[0] = apply_cmvn(data[0], compute_cmvn({data[0].feats}));
  Model m(mc, 1);
  TrainConfig cfg;
  cfg.spec_augment = false;
  cfg.warmup_steps = 50;
  cfg.lr = 2e-3;
  Trainer t(m, cfg);
  double lc = 1e9;
  std::size_t steps = 0;
  while (steps < 500 && lc >= 0.05) {
    lc = t.step(ptrs(data, 0, 1)).ctc;
    ++steps;
  }
  EXPECT_LT(lc, 0.05) << "after " << steps << " steps";
}

TEST(Degeneration, OneExpertWithoutAuxLossesMatchesDense) {
  const auto data = tiny_corpus(4);
  ModelConfig moe = tiny_model(1);
  ModelConfig dense = tiny_model(0);
  TrainConfig cfg = quick_train();
  cfg.alpha = cfg.beta = cfg.gamma = 0.0;
  Model a(moe, 7), b(dense, 7);
  Trainer ta(a, cfg), tb(b, cfg);
  for (std::size_t s = 0; s < 6; ++s) {
    const auto batch = ptrs(data, s % 2 * 2, s % 2 * 2 + 2);
    const StepMetrics ma = ta.step(batch), mb = tb.step(batch);
    EXPECT_EQ(ma.loss, mb.loss) << s;
    EXPECT_EQ(ma.ctc, mb.ctc);
    EXPECT_EQ(ma.aed_sum, mb.aed_sum);
    EXPECT_EQ(ma.grad_norm, mb.grad_norm);
  }
  for (const auto& [name, t] : b.params().entries()) {
    const std::string mapped = name.find(".ffn2.") != std::string::npos && name.find(".norm.") == std::string::npos
                                   ? std::string(name).replace(name.find(".ffn2.") + 6, 0, "experts.0.")
                                   : name;
    const Tensor& o = a.params().get(mapped);
    for (std::size_t k = 0; k < t.size(); ++k) ASSERT_EQ(t[k], o[k]) << name;
  }
}

TEST(Checkpoint, RoundTripReproducesEvalLoss) {
  TempDir dir("ck");
  const auto data = tiny_corpus(3);
  Model m(tiny_model(), 6);
  Trainer t(m, quick_train());
  t.step(ptrs(data, 0, 2));
  save_checkpoint(dir.path / "a.ck", m, {{"note", "x"}});
  const Model back = load_model(dir.path / "a.ck");
  EXPECT_NEAR(eval_ctc(back, data), eval_ctc(m, data), 1e-12);
  EXPECT_EQ(eval_ctc(back, data), eval_ctc(m, data));
  EXPECT_EQ(read_checkpoint(dir.path / "a.ck").meta["note"], "x");
  EXPECT_FALSE(fs::exists(dir.path / "a.ck.tmp"));
}

TEST(Checkpoint, HeaderLayout) {
  TempDir dir("ck_layout");
  const Model m(tiny_model(), 6);
  save_checkpoint(dir.path / "a.ck", m);
  std::ifstream is(dir.path / "a.ck", std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  EXPECT_EQ(std::string(magic, 4), "3MCK");
  const auto len = detail::read_le<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text);
  EXPECT_EQ(header["params"].size(), m.params().size());
  EXPECT_EQ(fs::file_size(dir.path / "a.ck"), 12 + len + m.params().numel() * 8);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TempDir dir("ck_bad");
  {
    std::ofstream os(dir.path / "x.ck");
    os << "nope";
  }
  EXPECT_THROW(read_checkpoint(dir.path / "x.ck"), FormatError);
  const Model m(tiny_model(), 6);
  save_checkpoint(dir.path / "t.ck", m);
  fs::resize_file(dir.path / "t.ck", fs::file_size(dir.path / "t.ck") - 8);
  EXPECT_THROW(read_checkpoint(dir.path / "t.ck"), FormatError);
}

TEST(Checkpoint, ModelRejectsMismatchedStore) {
  const Model m(tiny_model(2), 1);
  EXPECT_THROW(Model(tiny_model(3), m.params().clone()), std::invalid_argument);
}

TEST(Pretrain, EmbeddingCheckpointReproducesEvalLoss) {
  TempDir dir("pre");
  const auto data = tiny_corpus(4);
  Model m(tiny_model(), 8);
  TrainConfig cfg = quick_train();
  cfg.max_epochs = 2;
  const Model untouched = m;
  const TrainResult r = pretrain_embedding(m, data, {}, cfg);
  EXPECT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.steps, 4u);
  // Only the embedding network moves.
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& [name, t] = m.params().entries()[i];
    if (name.rfind("embed.", 0) == 0) continue;
    const auto a = t.data(), b = untouched.params().entries()[i].second.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << name;
  }
  EXPECT_EQ(eval_embedding_ctc(m, data), r.final_record.eval_ctc);
  save_embedding_checkpoint(dir.path / "embedding.ck", m);
  Model fresh(tiny_model(), 99);
  load_embedding_checkpoint(fresh, dir.path / "embedding.ck");
  EXPECT_EQ(eval_embedding_ctc(fresh, data), eval_embedding_ctc(m, data));
}

TEST(TrainLoop, SelectsLowestEvalAndWritesArtifacts) {
  TempDir dir("loop");
  const auto data = tiny_corpus(6);
  const std::vector<FeatureSequence> train_set(data.begin(), data.begin() + 4), dev(data.begin() + 4, data.end());
  Model m(tiny_model(), 10);
  TrainConfig cfg = quick_train();
  cfg.max_epochs = 4;
  RunOptions opts;
  opts.out_dir = dir.path;
  const TrainResult r = train(m, train_set, dev, cfg, opts);
  ASSERT_EQ(r.records.size(), 4u);
  EXPECT_EQ(r.steps, 8u);
  const auto& best = select_final(r.records);
  EXPECT_EQ(r.final_record.epoch, best.epoch);
  for (const auto& rec : r.records) EXPECT_GE(rec.eval_ctc, best.eval_ctc);
  EXPECT_EQ(eval_ctc(m, dev), best.eval_ctc);
  EXPECT_TRUE(fs::exists(best.path));
  EXPECT_TRUE(fs::exists(r.records.back().path));
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir.path / "checkpoints")) files += e.path().extension() == ".ck";
  EXPECT_LE(files, 2u);
  EXPECT_TRUE(fs::exists(dir.path / "checkpoints" / "records.json"));
  std::ifstream ms(dir.path / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string l; std::getline(ms, l);) ++lines;
  EXPECT_EQ(lines, 8u);
  EXPECT_TRUE(fs::exists(dir.path / "routing.jsonl"));
}

TEST(TrainLoop, MaxStepsStopsEarly) {
  const auto data = tiny_corpus(4);
  Model m(tiny_model(), 11);
  TrainConfig cfg = quick_train();
  cfg.max_steps = 3;
  const TrainResult r = train(m, data, {}, cfg);
  EXPECT_EQ(r.steps, 3u);
  EXPECT_EQ(r.records.size(), 2u);
}

TEST(Dataset, LoadAppliesCmvn) {
  TempDir dir("ds");
  SyntheticCorpusConfig sc;
  sc.num_utts = 4;
  const PreparedCorpus pc = write_synthetic_corpus(dir.path, sc);
  const auto stats = load_cmvn(pc.cmvn);
  const auto ds = load_dataset(pc.train_manifest, stats, sc.vocab_size);
  const auto raw = synthesize_corpus(sc);
  ASSERT_EQ(ds.size(), 4u);
  EXPECT_EQ(ds[1].feats, apply_cmvn(raw[1], stats).feats);
}
