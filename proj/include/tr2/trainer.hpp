#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tr2/fusion.hpp"
#include "tr2/guidance.hpp"
#include "tr2/losses.hpp"
#include "tr2/metrics.hpp"
#include "tr2/synth.hpp"

namespace tr2 {

enum class GuidanceMode { kNone, kEq2, kEq4, kBinary };

std::string to_string(GuidanceMode m);

struct RunConfig {
  GenConfig gen;
  FusionConfig fusion;
  OptimConfig optim;
  EvalConfig eval;
  std::int64_t epochs = 30;
  std::int64_t batch_videos = 8;
  std::uint64_t seed = 0;
  Task task = Task::kPredCls;
  GuidanceMode guidance = GuidanceMode::kEq2;
  AblationFlags ablation;
  std::string provider = "stub";  // "stub" or "file"
  std::int64_t d_text = 512;
  std::string embedding_table;  // file provider source
  std::string dataset_path;
  std::string clip_path;
  std::string val_dataset_path;
  std::string val_clip_path;
  std::string checkpoint_path;
  std::string report_dir;

  void validate() const;
};

// Canonical one-key-per-line serialization; also the config file format
// (UTF-8, `key = value`, `#` comments, dotted keys). Unknown keys are
// rejected with their line number.
std::string serialize_config(const RunConfig& cfg);
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::uint64_t config_hash(const RunConfig& cfg);

struct RunRecord {
  std::vector<LossBreakdown> epoch_losses;
  std::vector<RecallRow> val_recall;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  std::string to_json() const;
  static RunRecord from_json(const std::string& text);
};

struct Dataset {
  std::vector<VideoSample> videos;
  ClipEmbeddings embeddings;
  Vocabulary vocab;
};

Dataset load_dataset(const RunConfig& cfg, const std::string& dataset_path,
                     const std::string& clip_path);

// Creates every parameter group (fusion, guidance, heads) from the run seed.
ParamStore init_model(const RunConfig& cfg, const Vocabulary& vocab);

std::unique_ptr<TextProvider> make_provider(const RunConfig& cfg);

struct TrainResult {
  ParamStore store;
  RunRecord record;
};

// Deterministic training loop: whole-video batches, epoch shuffling seeded
// by (seed, epoch), per-video tapes with ordered gradient summation.
TrainResult train(const RunConfig& cfg, const Dataset& train_data,
                  const Dataset* val_data);

// Model predictions for evaluation (dropout off).
std::vector<VideoPredictions> predict(const RunConfig& cfg, ParamStore& store,
                                      const Dataset& data);

std::vector<RecallRow> evaluate(const RunConfig& cfg, ParamStore& store,
                                const Dataset& data);

struct GradCheckResult {
  std::string variant;
  GradCheckReport report;
};

// Full-objective finite-difference check on toy dimensions for every
// guidance variant.
std::vector<GradCheckResult> gradcheck(const RunConfig& base);

struct AblationRow {
  std::string variant;
  std::vector<std::int64_t> ks;
  std::vector<double> mean_recall;  // per K, averaged over seeds
  std::vector<double> delta;        // vs the first row
};

// Named variants: tr2, tr2bin, tr2minus, eq4, plus fusion-matrix rows
// (base, decoder_only, spatial_only, spatial_decoder, spatial_token, full).
RunConfig apply_variant(RunConfig cfg, const std::string& name);

std::vector<AblationRow> ablate(const RunConfig& base,
                                const std::vector<std::string>& variants,
                                std::int64_t num_seeds,
                                const Dataset& train_data,
                                const Dataset& val_data);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace tr2
