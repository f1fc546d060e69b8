// m3asr: prepare | pretrain-embedding | train | decode | score | flops | report

#include <CLI11.hpp>
#include <iostream>
#include <optional>

#include "m3asr/pipeline.hpp"

using namespace m3asr;
using nlohmann::json;

namespace {

// Flag values that, when given, override the config file.
struct Overrides {
  json patch = json::object();

  template <typename T>
  void bind(CLI::App* app, const std::string& flag, const std::string& section, const std::string& key,
            const std::string& help) {
    auto holder = std::make_shared<std::optional<T>>();
    holders.push_back(holder);
    app->add_option(flag, *holder, help);
    appliers.push_back([this, holder, section, key] {
      if (holder->has_value()) patch[section][key] = **holder;
    });
  }

  void bind_flag(CLI::App* app, const std::string& flag, const std::string& section, const std::string& key,
                 const std::string& help) {
    auto holder = std::make_shared<std::optional<bool>>();
    holders.push_back(holder);
    app->add_flag_callback(flag, [holder] { *holder = true; }, help);
    appliers.push_back([this, holder, section, key] {
      if (holder->has_value()) patch[section][key] = **holder;
    });
  }

  json collect() {
    for (auto& f : appliers) f();
    return patch;
  }

  std::vector<std::shared_ptr<void>> holders;
  std::vector<std::function<void()>> appliers;
};

void add_model_flags(CLI::App* app, Overrides& o) {
  o.bind<std::size_t>(app, "--input-dim", "model", "input_dim", "Feature dimension");
  o.bind<int>(app, "--vocab-size", "model", "vocab_size", "Output tokens (excluding blank and <sos>/<eos>)");
  o.bind<std::size_t>(app, "--num-blocks", "encoder", "num_blocks", "Encoder blocks");
  o.bind<std::size_t>(app, "--d-att", "encoder", "d_att", "Model width");
  o.bind<std::size_t>(app, "--d-ff", "encoder", "d_ff", "FFN width");
  o.bind<std::size_t>(app, "--heads", "encoder", "heads", "Attention heads");
  o.bind<std::size_t>(app, "--kernel", "encoder", "kernel", "Depthwise conv kernel (odd)");
  o.bind<double>(app, "--dropout", "encoder", "dropout", "Dropout rate");
  o.bind<std::size_t>(app, "--subsample-channels", "encoder", "subsample_channels", "Subsampling conv channels");
  o.bind<std::size_t>(app, "--num-experts", "model", "num_experts", "Experts per MoE layer (0: dense)");
  o.bind<std::size_t>(app, "--expert-ff", "model", "expert_ff", "Expert FFN width (0: d_ff)");
  o.bind<std::size_t>(app, "--embed-blocks", "model", "embed_blocks", "Embedding network blocks (0: half)");
  o.bind<std::size_t>(app, "--embed-dim", "model", "embed_dim", "Embedding width (0: d_att)");
  o.bind_flag(app, "--identical-expert-init", "model", "identical_expert_init", "Initialise all experts alike");
  o.bind<std::size_t>(app, "--decoder-blocks", "model", "decoder_blocks", "Decoder blocks");
  o.bind<std::size_t>(app, "--decoder-ff", "model", "decoder_ff", "Decoder FFN width (0: d_ff)");
  o.bind<std::size_t>(app, "--num-levels", "model", "num_levels", "Decoder levels K, counting the final one");
}

void add_train_flags(CLI::App* app, Overrides& o, const std::string& section) {
  o.bind<double>(app, "--alpha", section, "alpha", "Sparsity loss weight");
  o.bind<double>(app, "--beta", section, "beta", "Mean importance loss weight");
  o.bind<double>(app, "--gamma", section, "gamma", "Embedding CTC loss weight");
  o.bind<double>(app, "--eta", section, "eta", "CTC weight in the joint loss");
  o.bind<double>(app, "--label-smoothing", section, "label_smoothing", "AED label smoothing");
  o.bind<std::size_t>(app, "--max-epochs", section, "max_epochs", "Epoch limit");
  o.bind<std::size_t>(app, "--max-steps", section, "max_steps", "Step limit (0: none)");
  o.bind<std::size_t>(app, "--batch-size", section, "batch_size", "Utterances per step");
  o.bind<double>(app, "--lr", section, "lr", "Peak learning rate");
  o.bind<std::size_t>(app, "--warmup-steps", section, "warmup_steps", "Warmup steps");
  o.bind<double>(app, "--grad-clip", section, "grad_clip", "Global gradient norm limit");
  o.bind<std::uint64_t>(app, "--seed", section, "seed", "Random seed");
  o.bind<bool>(app, "--spec-augment", section, "spec_augment", "Enable SpecAugment (true/false)");
  o.bind<std::size_t>(app, "--freq-mask-max", section, "freq_mask_max", "Maximum frequency mask width F");
  o.bind<std::size_t>(app, "--time-mask-max", section, "time_mask_max", "Maximum time mask width T");
  o.bind<std::size_t>(app, "--freq-masks", section, "freq_masks", "Number of frequency masks");
  o.bind<std::size_t>(app, "--time-masks", section, "time_masks", "Number of time masks");
}

void add_decode_flags(CLI::App* app, Overrides& o) {
  o.bind<std::size_t>(app, "--beam", "decode", "beam", "CTC prefix beam width");
  o.bind<std::size_t>(app, "--nbest", "decode", "nbest", "Hypotheses passed to rescoring");
  o.bind<double>(app, "--mu", "decode", "mu", "CTC weight in the combined score");
}

/// Config file (optional) with flag overrides applied on top.
RunConfig resolve(const std::string& config_path, json patch) {
  json base = config_path.empty() ? json(RunConfig{}) : read_json_file(config_path);
  if (patch.contains("encoder")) {
    patch["model"]["encoder"] = patch["encoder"];
    patch.erase("encoder");
  }
  base.merge_patch(patch);
  RunConfig cfg;
  base.get_to(cfg);
  cfg.model.validate();
  cfg.train.validate();
  cfg.pretrain.validate();
  return cfg;
}

void print_step(const StepMetrics& m) {
  if (m.step % 50 != 0) return;
  std::fprintf(stderr, "step %zu epoch %zu L=%.4f L_c=%.4f sum_L_a=%.4f L_e=%.4f L_s=%.4f L_m=%.4f lr=%.2e\n", m.step,
               m.epoch, m.loss, m.ctc, m.aed_sum, m.embed_ctc, m.sparsity, m.importance, m.lr);
}

void print_epoch(const CheckpointRecord& r) {
  std::fprintf(stderr, "epoch %zu step %zu eval_ctc=%.6f\n", r.epoch, r.step, r.eval_ctc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-path, multi-level MoE speech recognition toolkit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "Write a synthetic corpus with manifests and CMVN stats");
  std::string prep_out;
  SyntheticCorpusConfig corpus;
  prepare->add_option("--out-dir", prep_out, "Output directory")->required();
  prepare->add_option("--num-utts", corpus.num_utts, "Utterances")->capture_default_str();
  prepare->add_option("--vocab-size", corpus.vocab_size, "Token vocabulary")->capture_default_str();
  prepare->add_option("--seed", corpus.seed, "Random seed")->capture_default_str();
  prepare->add_option("--dims", corpus.dims, "Feature dimension")->capture_default_str();

  // pretrain-embedding
  auto* pretrain = app.add_subcommand("pretrain-embedding", "CTC pretraining of the shared embedding network");
  Overrides pre_o;
  std::string pre_config, pre_data, pre_out;
  pretrain->add_option("--config", pre_config, "JSON config file");
  pretrain->add_option("--data-dir", pre_data, "Directory with train.jsonl, dev.jsonl, cmvn.json")->required();
  pretrain->add_option("--out-dir", pre_out, "Run directory")->required();
  add_model_flags(pretrain, pre_o);
  add_train_flags(pretrain, pre_o, "pretrain");

  // train
  auto* train_cmd = app.add_subcommand("train", "Joint CTC/AED training with MoE and multi-level decoders");
  Overrides tr_o;
  std::string tr_config, tr_data, tr_out, tr_embed;
  train_cmd->add_option("--config", tr_config, "JSON config file");
  train_cmd->add_option("--data-dir", tr_data, "Directory with train.jsonl, dev.jsonl, cmvn.json")->required();
  train_cmd->add_option("--out-dir", tr_out, "Run directory")->required();
  train_cmd->add_option("--embedding-checkpoint", tr_embed, "Pretrained embedding network");
  add_model_flags(train_cmd, tr_o);
  add_train_flags(train_cmd, tr_o, "train");

  // decode
  auto* decode = app.add_subcommand("decode", "CTC N-best with attention rescoring");
  Overrides de_o;
  std::string de_config, de_ck, de_manifest, de_cmvn, de_out;
  std::size_t workers = 1;
  bool strip = false;
  decode->add_option("--config", de_config, "JSON config file (decode section)");
  decode->add_option("--checkpoint", de_ck, "Model checkpoint")->required();
  decode->add_option("--manifest", de_manifest, "Utterances to decode")->required();
  decode->add_option("--cmvn", de_cmvn, "CMVN stats")->required();
  decode->add_option("--out-dir", de_out, "Output directory")->required();
  decode->add_option("--workers", workers, "Decoding threads")->capture_default_str();
  decode->add_flag("--strip-auxiliary", strip, "Drop auxiliary decoders before decoding");
  add_decode_flags(decode, de_o);

  // score
  auto* score = app.add_subcommand("score", "Character error rate of decode output");
  std::string sc_hyp, sc_ref, sc_out;
  score->add_option("--hyp", sc_hyp, "decode.jsonl")->required();
  score->add_option("--ref", sc_ref, "Reference manifest")->required();
  score->add_option("--out-dir", sc_out, "Output directory")->required();

  // flops
  auto* flops = app.add_subcommand("flops", "Parameter and FLOPs report for one second of audio");
  Overrides fl_o;
  std::string fl_config, fl_out, fl_name = "model";
  bool fl_reference = false;
  flops->add_option("--config", fl_config, "JSON config file");
  flops->add_option("--out-dir", fl_out, "Output directory")->required();
  flops->add_option("--name", fl_name, "Row label")->capture_default_str();
  flops->add_flag("--reference-presets", fl_reference, "Report the published-scale configurations instead");
  add_model_flags(flops, fl_o);

  // report
  auto* report = app.add_subcommand("report", "Summarise routing statistics of a training run");
  std::string rp_run;
  report->add_option("--run-dir", rp_run, "Training run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "prepare") {
      const PreparedCorpus pc = cmd_prepare(prep_out, corpus);
      std::printf("train %zu dev %zu\n", pc.train_count, pc.dev_count);
    } else if (cmd == "pretrain-embedding") {
      const RunConfig cfg = resolve(pre_config, pre_o.collect());
      RunOptions opts;
      opts.on_step = print_step;
      opts.on_epoch = print_epoch;
      const TrainResult r = cmd_pretrain_embedding(cfg, DataPaths::in(pre_data), pre_out, opts);
      std::printf("steps %zu best_epoch %zu eval_ctc %.6f\n", r.steps, r.final_record.epoch, r.final_record.eval_ctc);
    } else if (cmd == "train") {
      const RunConfig cfg = resolve(tr_config, tr_o.collect());
      RunOptions opts;
      opts.on_step = print_step;
      opts.on_epoch = print_epoch;
      std::optional<fs::path> embed;
      if (!tr_embed.empty()) embed = tr_embed;
      const TrainResult r = cmd_train(cfg, DataPaths::in(tr_data), tr_out, embed, opts);
      std::printf("steps %zu best_epoch %zu eval_ctc %.6f\n", r.steps, r.final_record.epoch, r.final_record.eval_ctc);
    } else if (cmd == "decode") {
      const RunConfig cfg = resolve(de_config, de_o.collect());
      const auto results = cmd_decode(de_ck, de_manifest, de_cmvn, de_out, cfg.decode, workers, strip);
      std::printf("decoded %zu\n", results.size());
    } else if (cmd == "score") {
      const CorpusScore s = cmd_score(sc_hyp, sc_ref, sc_out);
      for (const auto& id : s.excluded) std::fprintf(stderr, "warning: %s has an empty reference, excluded\n", id.c_str());
      std::fputs(format_score_table(s).c_str(), stdout);
    } else if (cmd == "flops") {
      std::vector<CostReport> rows;
      if (fl_reference) {
        for (const auto& [name, p] : reference_presets()) rows.push_back(cost_report(reference_config(p), name));
        json all = json::array();
        for (const auto& r : rows) all.push_back(cost_report_json(r));
        write_json_file(fs::path(fl_out) / "report.json", all);
      } else {
        rows.push_back(cmd_flops(resolve(fl_config, fl_o.collect()).model, fl_out, fl_name));
      }
      std::fputs(format_cost_table(rows).c_str(), stdout);
    } else if (cmd == "report") {
      std::ifstream is(fs::path(rp_run) / "routing.jsonl");
      if (!is) throw FormatError("no routing.jsonl in " + rp_run);
      std::string line, last;
      std::size_t steps = 0;
      while (std::getline(is, line))
        if (!line.empty()) last = line, ++steps;
      if (steps == 0) throw FormatError("routing.jsonl is empty");
      const json j = json::parse(last);
      const auto hist = j.at("histograms").get<std::vector<std::vector<std::size_t>>>();
      std::printf("steps %zu last_step %zu L_s %.6f L_m %.6f\n", steps, j.at("step").get<std::size_t>(),
                  j.at("L_s").get<double>(), j.at("L_m").get<double>());
      for (std::size_t l = 0; l < hist.size(); ++l) {
        std::printf("layer %zu entropy %.4f histogram", l, utilization_entropy(hist[l]));
        for (auto c : hist[l]) std::printf(" %zu", c);
        std::printf("\n");
      }
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '\n') c = ' ';
    std::fprintf(stderr, "error: %s: %s\n", cmd.c_str(), msg.c_str());
    return 1;
  }
  return 0;
}
