#pragma once

// Subcommand bodies shared by the command-line tool and the end-to-end tests.
// Every command writes its resolved configuration to <out_dir>/config.json.
//
// Run directory layout:
//   config.json      resolved configuration and run metadata
//   metrics.jsonl    one line per optimiser step
//   routing.jsonl    per-step expert histograms with L_s and L_m
//   checkpoints/     epoch-NNN.ck (selected and latest only), records.json
//   final.ck         selected checkpoint
//   embedding.ck     pretrained embedding network (pretrain-embedding)
//   decode.jsonl     best hypothesis per utterance
//   nbest.jsonl      rescored N-best per utterance
//   report.json      scoring or cost report

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "m3asr/checkpoint.hpp"
#include "m3asr/features.hpp"
#include "m3asr/inference.hpp"
#include "m3asr/training.hpp"

namespace m3asr {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TrainConfig pretrain;
  DecodeOptions decode;
};

inline void to_json(nlohmann::json& j, const DecodeOptions& d) {
  j = {{"beam", d.beam}, {"nbest", d.nbest}, {"mu", d.mu}};
}

inline void from_json(const nlohmann::json& j, DecodeOptions& d) {
  d.beam = j.value("beam", d.beam);
  d.nbest = j.value("nbest", d.nbest);
  d.mu = j.value("mu", d.mu);
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model}, {"train", c.train}, {"pretrain", c.pretrain}, {"decode", c.decode}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("pretrain")) j.at("pretrain").get_to(c.pretrain);
  if (j.contains("decode")) j.at("decode").get_to(c.decode);
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

/// config.json for a run: command, resolved configuration, seed, timestamps.
inline void write_run_manifest(const fs::path& out_dir, const std::string& command, const nlohmann::json& resolved,
                               std::uint64_t seed, const std::string& started) {
  write_json_file(out_dir / "config.json", {{"command", command},
                                            {"config", resolved},
                                            {"seed", seed},
                                            {"started", started},
                                            {"finished", utc_timestamp()}});
}

struct DataPaths {
  fs::path train;
  fs::path dev;
  fs::path cmvn;

  static DataPaths in(const fs::path& dir) { return {dir / "train.jsonl", dir / "dev.jsonl", dir / "cmvn.json"}; }
};

// ---------------------------------------------------------------------------

inline PreparedCorpus cmd_prepare(const fs::path& out_dir, const SyntheticCorpusConfig& cfg) {
  const std::string started = utc_timestamp();
  PreparedCorpus pc = write_synthetic_corpus(out_dir, cfg);
  write_run_manifest(out_dir, "prepare",
                     {{"num_utts", cfg.num_utts},
                      {"vocab_size", cfg.vocab_size},
                      {"dims", cfg.dims},
                      {"train_fraction", cfg.train_fraction}},
                     cfg.seed, started);
  return pc;
}

inline TrainResult cmd_pretrain_embedding(const RunConfig& cfg, const DataPaths& data, const fs::path& out_dir,
                                          const RunOptions& extra = {}) {
  const std::string started = utc_timestamp();
  const CmvnStats stats = load_cmvn(data.cmvn);
  const auto train_set = load_dataset(data.train, stats, cfg.model.vocab_size);
  const auto dev = fs::exists(data.dev) ? load_dataset(data.dev, stats, cfg.model.vocab_size)
                                        : std::vector<FeatureSequence>{};
  Model model(cfg.model, cfg.pretrain.seed);
  RunOptions opts = extra;
  opts.out_dir = out_dir;
  TrainResult r = pretrain_embedding(model, train_set, dev, cfg.pretrain, opts);
  save_embedding_checkpoint(out_dir / "embedding.ck", model,
                            {{"epoch", r.final_record.epoch}, {"eval_ctc", r.final_record.eval_ctc}});
  write_run_manifest(out_dir, "pretrain-embedding", cfg, cfg.pretrain.seed, started);
  return r;
}

inline TrainResult cmd_train(const RunConfig& cfg, const DataPaths& data, const fs::path& out_dir,
                             const std::optional<fs::path>& embedding_checkpoint = std::nullopt,
                             const RunOptions& extra = {}) {
  const std::string started = utc_timestamp();
  const CmvnStats stats = load_cmvn(data.cmvn);
  const auto train_set = load_dataset(data.train, stats, cfg.model.vocab_size);
  const auto dev = fs::exists(data.dev) ? load_dataset(data.dev, stats, cfg.model.vocab_size)
                                        : std::vector<FeatureSequence>{};
  Model model(cfg.model, cfg.train.seed);
  if (embedding_checkpoint) load_embedding_checkpoint(model, *embedding_checkpoint);
  RunOptions opts = extra;
  opts.out_dir = out_dir;
  TrainResult r = train(model, train_set, dev, cfg.train, opts);
  save_checkpoint(out_dir / "final.ck", model,
                  {{"epoch", r.final_record.epoch}, {"step", r.final_record.step}, {"eval_ctc", r.final_record.eval_ctc}});
  write_run_manifest(out_dir, "train", cfg, cfg.train.seed, started);
  return r;
}

/// Decodes a manifest with a checkpoint; writes decode.jsonl and nbest.jsonl.
inline std::vector<DecodeResult> cmd_decode(const fs::path& checkpoint, const fs::path& manifest, const fs::path& cmvn,
                                            const fs::path& out_dir, const DecodeOptions& opt, std::size_t workers = 1,
                                            bool strip_auxiliary = false) {
  const std::string started = utc_timestamp();
  Model model = load_model(checkpoint);
  if (strip_auxiliary) model = strip_auxiliary_decoders(model);
  const auto data = load_dataset(manifest, load_cmvn(cmvn), model.config().vocab_size);
  const auto results = decode_corpus(model, data, opt, workers);
  fs::create_directories(out_dir);
  std::ofstream best(out_dir / "decode.jsonl", std::ios::trunc), nb(out_dir / "nbest.jsonl", std::ios::trunc);
  if (!best || !nb) throw FormatError("cannot write decode outputs in " + out_dir.string());
  for (const auto& r : results) {
    best << hypothesis_json(r.utt_id, r.best).dump() << '\n';
    nlohmann::json list = nlohmann::json::array();
    for (const auto& h : r.nbest) {
      nlohmann::json row = hypothesis_json(r.utt_id, h);
      row.erase("utt_id");
      list.push_back(row);
    }
    nb << nlohmann::json{{"utt_id", r.utt_id}, {"nbest", list}}.dump() << '\n';
  }
  write_run_manifest(out_dir, "decode",
                     {{"checkpoint", checkpoint.string()},
                      {"manifest", manifest.string()},
                      {"decode", opt},
                      {"workers", workers},
                      {"strip_auxiliary", strip_auxiliary},
                      {"model", model.config()}},
                     0, started);
  return results;
}

/// Scores decode.jsonl against a reference manifest; writes report.json.
inline CorpusScore cmd_score(const fs::path& hypotheses, const fs::path& reference, const fs::path& out_dir) {
  const std::string started = utc_timestamp();
  std::map<std::string, std::vector<int>> hyp;
  {
    std::ifstream is(hypotheses);
    if (!is) throw FormatError("cannot open " + hypotheses.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        hyp[j.at("utt_id").get<std::string>()] = j.at("tokens").get<std::vector<int>>();
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(hypotheses.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  std::vector<ScoredResult> rows;
  for (const auto& h : load_manifest(reference)) {
    auto it = hyp.find(h.utt_id);
    if (it == hyp.end()) throw FormatError("no hypothesis for utterance " + h.utt_id);
    rows.push_back(score_utterance(h.utt_id, h.tokens, it->second));
  }
  CorpusScore s = score_corpus(rows);
  nlohmann::json per = nlohmann::json::array();
  for (const auto& r : s.utterances) {
    per.push_back({{"utt_id", r.utt_id},
                   {"ref_len", r.ref_length()},
                   {"S", r.edits.substitutions},
                   {"D", r.edits.deletions},
                   {"I", r.edits.insertions},
                   {"cer", r.cer()}});
  }
  write_json_file(out_dir / "report.json", {{"cer", s.cer},
                                            {"errors", s.errors},
                                            {"ref_tokens", s.ref_tokens},
                                            {"excluded", s.excluded},
                                            {"utterances", per}});
  write_run_manifest(out_dir, "score", {{"hypotheses", hypotheses.string()}, {"reference", reference.string()}}, 0,
                     started);
  return s;
}

inline CostReport cmd_flops(const ModelConfig& cfg, const fs::path& out_dir, const std::string& name = "model") {
  const std::string started = utc_timestamp();
  CostReport r = cost_report(cfg, name);
  write_json_file(out_dir / "report.json", cost_report_json(r));
  write_run_manifest(out_dir, "flops", {{"model", cfg}}, 0, started);
  return r;
}

}  // namespace m3asr
