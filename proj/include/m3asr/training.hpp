#pragma once

// Objective assembly, optimiser, schedules and the epoch loop.
//
// A batch is a list of utterances, each run through its own graph; the
// per-utterance joint and embedding CTC terms are averaged over the batch
// while the routing losses see every frame of the batch at once. One backward
// call then covers the whole batch.
//
//   L = mean_u(eta L_c + (1 - eta) sum_j L_a_j + gamma L_e) + alpha L_s + beta L_m

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "m3asr/checkpoint.hpp"
#include "m3asr/features.hpp"
#include "m3asr/model.hpp"

namespace m3asr {

struct TrainConfig {
  double alpha = 0.15;
  double beta = 0.15;
  double gamma = 0.01;
  double eta = 0.3;
  double label_smoothing = 0.1;
  std::size_t max_epochs = 26;
  std::size_t max_steps = 0;  // 0: no step limit
  std::size_t batch_size = 4;
  double lr = 2e-3;           // peak learning rate
  std::size_t warmup_steps = 1000;
  double grad_clip = 5.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  std::uint64_t seed = 1;
  bool spec_augment = true;
  SpecAugmentConfig augment;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("train: eta must lie in [0, 1]");
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw std::invalid_argument("train: alpha, beta, gamma must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
    if (lr < 0.0) throw std::invalid_argument("train: lr must be >= 0");
    if (grad_clip <= 0.0) throw std::invalid_argument("train: grad_clip must be positive");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw std::invalid_argument("train: label_smoothing must lie in [0, 1)");
  }

  MoEWeights moe_weights() const { return {alpha, beta, gamma}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"gamma", c.gamma},
       {"eta", c.eta},
       {"label_smoothing", c.label_smoothing},
       {"max_epochs", c.max_epochs},
       {"max_steps", c.max_steps},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"warmup_steps", c.warmup_steps},
       {"grad_clip", c.grad_clip},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"seed", c.seed},
       {"spec_augment", c.spec_augment},
       {"freq_mask_max", c.augment.max_freq_width},
       {"time_mask_max", c.augment.max_time_width},
       {"freq_masks", c.augment.num_freq_masks},
       {"time_masks", c.augment.num_time_masks}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.gamma = j.value("gamma", c.gamma);
  c.eta = j.value("eta", c.eta);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.seed = j.value("seed", c.seed);
  c.spec_augment = j.value("spec_augment", c.spec_augment);
  c.augment.max_freq_width = j.value("freq_mask_max", c.augment.max_freq_width);
  c.augment.max_time_width = j.value("time_mask_max", c.augment.max_time_width);
  c.augment.num_freq_masks = j.value("freq_masks", c.augment.num_freq_masks);
  c.augment.num_time_masks = j.value("time_masks", c.augment.num_time_masks);
}

// ---------------------------------------------------------------------------
// Loss assembly

/// eta * L_c + (1 - eta) * sum_j L_a_j
inline Tensor joint_loss(const Tensor& l_c, const std::vector<Tensor>& l_a, double eta) {
  return add(scale(l_c, eta), scale(multi_level_aed(l_a), 1.0 - eta));
}

/// L_MoE + L_Joint
inline Tensor total_loss(const Tensor& l_moe, const Tensor& l_joint) { return add(l_moe, l_joint); }

// ---------------------------------------------------------------------------
// Optimisation

/// Inverse square-root schedule with linear warmup; `step` counts from 1.
inline double warmup_lr(double peak, std::size_t step, std::size_t warmup) {
  if (warmup == 0) return peak / std::sqrt(static_cast<double>(std::max<std::size_t>(step, 1)));
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(warmup);
  return peak * std::min(s / w, std::sqrt(w / s));
}

/// L2 norm over every gradient entry of params.
inline double global_grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales gradients in place so their global norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.mutable_grad()) g *= f;
  }
  return norm;
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i].mutable_data();
      const auto g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
    }
  }

  std::vector<Tensor>& params() { return params_; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Data

/// Loads a manifest, reads every feature file and applies CMVN.
inline std::vector<FeatureSequence> load_dataset(const fs::path& manifest, const CmvnStats& stats, int vocab_size = 0) {
  std::vector<FeatureSequence> out;
  for (const auto& h : load_manifest(manifest, vocab_size)) out.push_back(apply_cmvn(h.load(), stats));
  return out;
}

// ---------------------------------------------------------------------------
// Steps

struct StepMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double ctc = 0.0;
  double aed_sum = 0.0;
  double aed_weighted = 0.0;  // (1 - eta) * sum_j L_a_j
  double sparsity = 0.0;
  double importance = 0.0;
  double embed_ctc = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double entropy = 0.0;
  std::vector<double> layer_entropy;
  std::vector<std::vector<std::size_t>> histograms;
};

inline void to_json(nlohmann::json& j, const StepMetrics& m) {
  j = {{"step", m.step},
       {"epoch", m.epoch},
       {"L", m.loss},
       {"L_c", m.ctc},
       {"sum_L_a", m.aed_sum},
       {"weighted_L_a", m.aed_weighted},
       {"L_s", m.sparsity},
       {"L_m", m.importance},
       {"L_e", m.embed_ctc},
       {"grad_norm", m.grad_norm},
       {"lr", m.lr},
       {"entropy", m.entropy},
       {"layer_entropy", m.layer_entropy}};
}

/// Mean entropy over MoE layers of the top-1 selection histograms.
inline double mean_layer_entropy(const std::vector<std::vector<std::size_t>>& histograms,
                                 std::vector<double>* per_layer = nullptr) {
  if (histograms.empty()) return 0.0;
  double s = 0.0;
  for (const auto& h : histograms) {
    const double e = utilization_entropy(h);
    if (per_layer) per_layer->push_back(e);
    s += e;
  }
  return s / static_cast<double>(histograms.size());
}

/// Graph-attached batch objective plus its components.
struct BatchObjective {
  Tensor total;
  Tensor ctc, aed_sum, embed_ctc, sparsity, importance;
  std::vector<std::vector<std::size_t>> histograms;  // per MoE layer
};

/// Builds the batch objective. Per-utterance forward contexts come from
/// make_ctx(u), so callers control dropout and augmentation.
inline BatchObjective batch_objective(const Model& model, const std::vector<const FeatureSequence*>& batch,
                                      const TrainConfig& cfg, const ForwardContext& ctx,
                                      const ForwardContext& embed_ctx,
                                      const std::function<FeatureSequence(const FeatureSequence&)>& augment = {}) {
  if (batch.empty()) throw std::invalid_argument("batch_objective: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  BatchObjective obj;
  std::vector<std::vector<Tensor>> layer_probs;
  Tensor per_utt_sum;
  for (const FeatureSequence* seq : batch) {
    const FeatureSequence input = augment ? augment(*seq) : *seq;
    UtteranceLosses l = model.losses(input.feats.to_tensor(), seq->tokens, ctx, cfg.label_smoothing, &embed_ctx);
    const Tensor aed = multi_level_aed(l.aed);
    Tensor u = joint_loss(l.ctc, l.aed, cfg.eta);
    if (l.embed_ctc.defined()) u = add(u, scale(l.embed_ctc, cfg.gamma));
    per_utt_sum = per_utt_sum.defined() ? add(per_utt_sum, u) : u;
    obj.ctc = obj.ctc.defined() ? add(obj.ctc, l.ctc) : l.ctc;
    obj.aed_sum = obj.aed_sum.defined() ? add(obj.aed_sum, aed) : aed;
    if (l.embed_ctc.defined()) obj.embed_ctc = obj.embed_ctc.defined() ? add(obj.embed_ctc, l.embed_ctc) : l.embed_ctc;
    layer_probs.resize(l.routing.size());
    obj.histograms.resize(l.routing.size());
    for (std::size_t k = 0; k < l.routing.size(); ++k) {
      layer_probs[k].push_back(l.routing[k].probs);
      const auto h = l.routing[k].histogram();
      obj.histograms[k].resize(h.size(), 0);
      for (std::size_t e = 0; e < h.size(); ++e) obj.histograms[k][e] += h[e];
    }
  }
  obj.total = scale(per_utt_sum, inv);
  obj.ctc = scale(obj.ctc, inv);
  obj.aed_sum = scale(obj.aed_sum, inv);
  if (obj.embed_ctc.defined()) obj.embed_ctc = scale(obj.embed_ctc, inv);

  if (!layer_probs.empty()) {
    // Routing losses over all frames of the batch, averaged over MoE layers.
    const double inv_layers = 1.0 / static_cast<double>(layer_probs.size());
    Tensor ls, lm;
    for (const auto& probs : layer_probs) {
      Tensor p = probs[0];
      if (probs.size() > 1) p = transpose(concat_last([&] {
        std::vector<Tensor> cols;
        for (const auto& q : probs) cols.push_back(transpose(q));
        return cols;
      }()));
      const Tensor s = sparsity_loss(p), m = mean_importance_loss(p);
      ls = ls.defined() ? add(ls, s) : s;
      lm = lm.defined() ? add(lm, m) : m;
    }
    obj.sparsity = scale(ls, inv_layers);
    obj.importance = scale(lm, inv_layers);
    if (cfg.alpha > 0.0) obj.total = add(obj.total, scale(obj.sparsity, cfg.alpha));
    if (cfg.beta > 0.0) obj.total = add(obj.total, scale(obj.importance, cfg.beta));
  }
  return obj;
}

class NonFiniteLoss : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Owns the optimiser and the random streams of a joint training run.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg)
      : model_(model),
        cfg_(std::move(cfg)),
        params_(model.params().tensors()),
        adam_(params_, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps),
        dropout_rng_(derive_seed(cfg_.seed, "dropout")),
        embed_rng_(derive_seed(cfg_.seed, "embed-dropout")) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  std::size_t steps() const { return step_; }

  StepMetrics step(const std::vector<const FeatureSequence*>& batch, std::size_t epoch = 0) {
    ++step_;
    const double drop = model_.config().encoder.dropout;
    ForwardContext ctx{true, drop, &dropout_rng_, nullptr, nullptr};
    ForwardContext ectx{true, drop, &embed_rng_, nullptr, nullptr};
    const std::size_t step_index = step_;
    auto augment = [&](const FeatureSequence& s) {
      if (!cfg_.spec_augment) return s;
      Rng r(derive_seed(cfg_.seed, step_index, s.utt_id));
      return spec_augment(s, r, cfg_.augment);
    };
    BatchObjective obj = batch_objective(model_, batch, cfg_, ctx, ectx, augment);

    StepMetrics m;
    m.step = step_;
    m.epoch = epoch;
    m.loss = obj.total.item();
    m.ctc = obj.ctc.item();
    m.aed_sum = obj.aed_sum.item();
    m.aed_weighted = (1.0 - cfg_.eta) * m.aed_sum;
    if (obj.embed_ctc.defined()) m.embed_ctc = obj.embed_ctc.item();
    if (obj.sparsity.defined()) m.sparsity = obj.sparsity.item();
    if (obj.importance.defined()) m.importance = obj.importance.item();
    m.histograms = obj.histograms;
    m.entropy = mean_layer_entropy(obj.histograms, &m.layer_entropy);
    if (!std::isfinite(m.loss)) {
      throw NonFiniteLoss("training diverged at step " + std::to_string(step_) + ": L=" + std::to_string(m.loss) +
                          " L_c=" + std::to_string(m.ctc) + " sum_L_a=" + std::to_string(m.aed_sum));
    }

    model_.params().zero_grad();
    backward(obj.total);
    m.grad_norm = clip_grad_norm(params_, cfg_.grad_clip);
    m.lr = warmup_lr(cfg_.lr, step_, cfg_.warmup_steps);
    adam_.step(m.lr);
    return m;
  }

 private:
  Model& model_;
  TrainConfig cfg_;
  std::vector<Tensor> params_;
  Adam adam_;
  Rng dropout_rng_;
  Rng embed_rng_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Mean CTC loss per utterance of the main head, eval mode.
inline double eval_ctc(const Model& model, const std::vector<FeatureSequence>& data) {
  if (data.empty()) throw std::invalid_argument("eval_ctc: empty evaluation set");
  NoGradGuard ng;
  ForwardContext ctx;
  double s = 0.0;
  for (const auto& seq : data) {
    const EncoderOutput eo = model.encode_features(seq.feats.to_tensor(), ctx, nullptr, false);
    s += ctc_loss(model.ctc_logprobs(eo.final), to_ctc_labels(seq.tokens)).item();
  }
  return s / static_cast<double>(data.size());
}

/// Mean CTC loss per utterance of the embedding network's own head.
inline double eval_embedding_ctc(const Model& model, const std::vector<FeatureSequence>& data) {
  if (data.empty()) throw std::invalid_argument("eval_embedding_ctc: empty evaluation set");
  NoGradGuard ng;
  ForwardContext ctx;
  double s = 0.0;
  for (const auto& seq : data) {
    const EmbeddingOutput e = model.embed(seq.feats.to_tensor(), ctx);
    s += ctc_loss(e.ctc_logprobs, to_ctc_labels(seq.tokens)).item();
  }
  return s / static_cast<double>(data.size());
}

/// Top-1 selection histograms per MoE layer over a whole set, eval mode.
inline std::vector<std::vector<std::size_t>> routing_histograms(const Model& model,
                                                                const std::vector<FeatureSequence>& data) {
  NoGradGuard ng;
  ForwardContext ctx;
  std::vector<std::vector<std::size_t>> hist;
  for (const auto& seq : data) {
    const EncoderOutput eo = model.encode_features(seq.feats.to_tensor(), ctx, nullptr, false);
    hist.resize(eo.routing.size());
    for (std::size_t k = 0; k < eo.routing.size(); ++k) {
      const auto h = eo.routing[k].histogram();
      hist[k].resize(h.size(), 0);
      for (std::size_t e = 0; e < h.size(); ++e) hist[k][e] += h[e];
    }
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Checkpoint bookkeeping

struct CheckpointRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double eval_ctc = 0.0;
  fs::path path;
};

inline void to_json(nlohmann::json& j, const CheckpointRecord& r) {
  j = {{"epoch", r.epoch}, {"step", r.step}, {"eval_ctc", r.eval_ctc}, {"path", r.path.string()}};
}

/// Lowest eval CTC loss; ties go to the earliest epoch.
inline const CheckpointRecord& select_final(const std::vector<CheckpointRecord>& records) {
  if (records.empty()) throw std::invalid_argument("select_final: no checkpoint records");
  const CheckpointRecord* best = &records[0];
  for (const auto& r : records) {
    if (r.eval_ctc < best->eval_ctc || (r.eval_ctc == best->eval_ctc && r.epoch < best->epoch)) best = &r;
  }
  return *best;
}

struct RunOptions {
  std::optional<fs::path> out_dir;  // metrics.jsonl, routing.jsonl, checkpoints/
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const CheckpointRecord&)> on_epoch;
  std::size_t eval_every_epochs = 1;
};

struct TrainResult {
  std::vector<CheckpointRecord> records;
  CheckpointRecord final_record;
  std::size_t steps = 0;
  double seconds = 0.0;
};

namespace detail {

inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng r(derive_seed(seed, epoch, "shuffle"));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(uniform_int(r, 0, i - 1))]);
  return idx;
}

inline std::string epoch_file(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch-%03zu.ck", epoch);
  return buf;
}

/// Keeps the selected and the latest checkpoint files, deletes the rest.
inline void prune_checkpoints(const std::vector<CheckpointRecord>& records) {
  const auto& best = select_final(records);
  for (std::size_t i = 0; i + 1 < records.size(); ++i) {
    if (records[i].path != best.path && !records[i].path.empty()) {
      std::error_code ec;
      fs::remove(records[i].path, ec);
    }
  }
}

class JsonLines {
 public:
  explicit JsonLines(const std::optional<fs::path>& path) {
    if (path) {
      os_.open(*path, std::ios::trunc);
      if (!os_) throw FormatError("cannot write " + path->string());
    }
  }
  void write(const nlohmann::json& j) {
    if (os_.is_open()) os_ << j.dump() << '\n' << std::flush;
  }

 private:
  std::ofstream os_;
};

}  // namespace detail

/// Joint training. Evaluates CTC loss on `dev` after each epoch, checkpoints
/// when out_dir is set, and restores the selected checkpoint's weights into
/// `model` before returning.
inline TrainResult train(Model& model, const std::vector<FeatureSequence>& train_set,
                         const std::vector<FeatureSequence>& dev, const TrainConfig& cfg,
                         const RunOptions& opts = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<fs::path> ck_dir;
  if (opts.out_dir) {
    ck_dir = *opts.out_dir / "checkpoints";
    fs::create_directories(*ck_dir);
  }
  detail::JsonLines metrics(opts.out_dir ? std::optional<fs::path>(*opts.out_dir / "metrics.jsonl") : std::nullopt);
  detail::JsonLines routing(opts.out_dir ? std::optional<fs::path>(*opts.out_dir / "routing.jsonl") : std::nullopt);

  Trainer trainer(model, cfg);
  TrainResult result;
  std::optional<ParamStore> best_params;
  bool done = false;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !done; ++epoch) {
    const auto order = detail::shuffled_indices(train_set.size(), cfg.seed, epoch);
    for (std::size_t b = 0; b < order.size() && !done; b += cfg.batch_size) {
      std::vector<const FeatureSequence*> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + cfg.batch_size); ++i) batch.push_back(&train_set[order[i]]);
      const StepMetrics m = trainer.step(batch, epoch);
      metrics.write(m);
      if (!m.histograms.empty()) {
        routing.write({{"step", m.step}, {"histograms", m.histograms}, {"L_s", m.sparsity}, {"L_m", m.importance}});
      }
      if (opts.on_step) opts.on_step(m);
      if (cfg.max_steps && trainer.steps() >= cfg.max_steps) done = true;
    }
    const bool last = done || epoch == cfg.max_epochs;
    if (!last && epoch % std::max<std::size_t>(1, opts.eval_every_epochs) != 0) continue;
    CheckpointRecord rec{epoch, trainer.steps(), dev.empty() ? eval_ctc(model, train_set) : eval_ctc(model, dev), {}};
    if (ck_dir) {
      rec.path = *ck_dir / detail::epoch_file(epoch);
      save_checkpoint(rec.path, model, {{"epoch", rec.epoch}, {"step", rec.step}, {"eval_ctc", rec.eval_ctc}});
    }
    const bool improved = result.records.empty() || rec.eval_ctc < select_final(result.records).eval_ctc;
    result.records.push_back(rec);
    if (improved) best_params = model.params().clone();
    if (ck_dir) detail::prune_checkpoints(result.records);
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  result.final_record = select_final(result.records);
  result.steps = trainer.steps();
  if (best_params) copy_params(model, *best_params, "");
  if (ck_dir) {
    std::ofstream os(*ck_dir / "records.json", std::ios::trunc);
    os << nlohmann::json{{"records", result.records}, {"final", result.final_record}}.dump(2) << '\n';
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// CTC pretraining of the shared embedding network alone. Only embed.*
/// parameters are updated. Returns the records; `model` ends up holding the
/// best embedding weights.
inline TrainResult pretrain_embedding(Model& model, const std::vector<FeatureSequence>& train_set,
                                      const std::vector<FeatureSequence>& dev, const TrainConfig& cfg,
                                      const RunOptions& opts = {}) {
  cfg.validate();
  if (!model.has_embedding()) throw std::invalid_argument("pretrain_embedding: model has no embedding network");
  if (train_set.empty()) throw std::invalid_argument("pretrain_embedding: empty training set");
  const auto t0 = std::chrono::steady_clock::now();
  const std::string prefix = kEmbedPrefix + ".";
  std::vector<Tensor> params = model.params().tensors_with_prefix(prefix);
  Adam adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Rng drop_rng(derive_seed(cfg.seed, "embed-dropout"));
  if (opts.out_dir) fs::create_directories(*opts.out_dir);
  detail::JsonLines metrics(opts.out_dir ? std::optional<fs::path>(*opts.out_dir / "metrics.jsonl") : std::nullopt);

  TrainResult result;
  std::optional<ParamStore> best;
  std::size_t step = 0;
  bool done = false;
  const auto& data = dev.empty() ? train_set : dev;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs && !done; ++epoch) {
    const auto order = detail::shuffled_indices(train_set.size(), cfg.seed, epoch);
    for (std::size_t b = 0; b < order.size() && !done; b += cfg.batch_size) {
      ++step;
      ForwardContext ctx{true, model.config().encoder.dropout, &drop_rng, nullptr, nullptr};
      Tensor total;
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      for (std::size_t i = b; i < end; ++i) {
        FeatureSequence s = train_set[order[i]];
        if (cfg.spec_augment) {
          Rng r(derive_seed(cfg.seed, step, s.utt_id));
          s = spec_augment(s, r, cfg.augment);
        }
        const EmbeddingOutput e = model.embed(s.feats.to_tensor(), ctx);
        const Tensor l = ctc_loss(e.ctc_logprobs, to_ctc_labels(s.tokens));
        total = total.defined() ? add(total, l) : l;
      }
      total = scale(total, 1.0 / static_cast<double>(end - b));
      StepMetrics m;
      m.step = step;
      m.epoch = epoch;
      m.loss = m.embed_ctc = total.item();
      if (!std::isfinite(m.loss)) throw NonFiniteLoss("embedding pretraining diverged at step " + std::to_string(step));
      for (auto& p : params) p.zero_grad();
      backward(total);
      m.grad_norm = clip_grad_norm(params, cfg.grad_clip);
      m.lr = warmup_lr(cfg.lr, step, cfg.warmup_steps);
      adam.step(m.lr);
      metrics.write(m);
      if (opts.on_step) opts.on_step(m);
      if (cfg.max_steps && step >= cfg.max_steps) done = true;
    }
    const bool last = done || epoch == cfg.max_epochs;
    if (!last && epoch % std::max<std::size_t>(1, opts.eval_every_epochs) != 0) continue;
    CheckpointRecord rec{epoch, step, eval_embedding_ctc(model, data), {}};
    const bool improved = result.records.empty() || rec.eval_ctc < select_final(result.records).eval_ctc;
    result.records.push_back(rec);
    if (improved) best = model.params().clone();
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  result.final_record = select_final(result.records);
  result.steps = step;
  if (best) copy_params(model, *best, prefix);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

/// Writes only the embed.* parameters with the model config.
inline void save_embedding_checkpoint(const fs::path& path, const Model& model, const nlohmann::json& meta = {}) {
  ParamStore store;
  for (const auto& [name, t] : model.params().entries()) {
    if (name.rfind(kEmbedPrefix + ".", 0) == 0) store.add(name, t);
  }
  save_params(path, model.config(), store, meta.is_null() ? nlohmann::json::object() : meta);
}

/// Initialises the embedding network of `model` from a checkpoint written by
/// save_embedding_checkpoint (or any full checkpoint).
inline void load_embedding_checkpoint(Model& model, const fs::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  copy_params(model, ck.params, kEmbedPrefix + ".");
}

}  // namespace m3asr
