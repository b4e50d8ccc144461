#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tr2/fusion.hpp"
#include "tr2/scenegraph.hpp"

namespace tr2 {

enum class Strategy { kWithConstraints, kNoConstraints, kTopK };

std::string to_string(Task t);
std::string to_string(Strategy s);

struct EvalConfig {
  std::vector<std::int64_t> recall_ks = {10, 20, 50};
  Strategy strategy = Strategy::kWithConstraints;
  std::int64_t top_k = 6;
  std::int64_t no_constraints_budget = 100;
  double iou_threshold = 0.5;
  Task task = Task::kPredCls;

  void validate() const;
};

// One candidate pair with its per-predicate scores, as produced by the model
// for a single frame.
struct PairPrediction {
  PairKey pair;
  std::int64_t subject_class = 0;
  std::int64_t object_class = 0;
  double subject_score = 1.0;
  double object_score = 1.0;
  BoundingBox subject_box;
  BoundingBox object_box;
  std::vector<double> predicate_scores;  // sigmoid outputs in [0,1]
};

struct ScoredTriplet {
  PairKey pair;
  std::int64_t subject_class = 0;
  std::int64_t object_class = 0;
  BoundingBox subject_box;
  BoundingBox object_box;
  std::int64_t predicate = 0;
  double score = 0.0;  // subject_score * object_score * predicate_score
};

struct GroundTruthTriplet {
  std::int64_t subject_id = 0;
  std::int64_t object_id = 0;
  std::int64_t subject_class = 0;
  std::int64_t object_class = 0;
  BoundingBox subject_box;
  BoundingBox object_box;
  std::int64_t predicate = 0;
};

std::vector<GroundTruthTriplet> ground_truth_triplets(const FrameGraph& frame);

// Predicate-choice strategies. Output is sorted by score descending with
// ties broken by (pair key, predicate id) ascending.
std::vector<ScoredTriplet> select_predictions(
    const std::vector<PairPrediction>& pairs, const EvalConfig& cfg);

// Per-frame Recall@K for each configured K. Greedy one-to-one matching in
// prediction order; each prediction claims the first compatible unmatched
// ground-truth triplet. Returns nullopt when the frame has no ground truth
// (such frames are excluded from corpus means).
std::optional<std::vector<double>> match_and_recall(
    const std::vector<ScoredTriplet>& predictions,
    const std::vector<GroundTruthTriplet>& gt, const EvalConfig& cfg);

struct FramePredictions {
  std::vector<PairPrediction> pairs;
};

struct VideoPredictions {
  std::string video_id;
  std::vector<FramePredictions> frames;  // aligned with VideoSample.frames
};

struct RecallRow {
  Task task;
  Strategy strategy;
  std::int64_t k = 0;
  double recall = 0.0;
};

// Mean per-frame recall over all counted frames of all videos.
std::vector<RecallRow> corpus_recall(
    const std::vector<VideoSample>& videos,
    const std::vector<VideoPredictions>& predictions, const EvalConfig& cfg);

// Per-video mean recall at a single K (for stratified reporting).
std::vector<double> per_video_recall(
    const std::vector<VideoSample>& videos,
    const std::vector<VideoPredictions>& predictions, const EvalConfig& cfg,
    std::int64_t k);

struct StratumRow {
  double upper = 0.0;  // cumulative data proportion at the stratum's end
  double recall = 0.0;
  double baseline_recall = 0.0;
  double gain = 0.0;
  std::int64_t videos = 0;
};

// Videos sorted by change degree ascending; all zero-change videos are
// merged into one stratum, the rest fall into equal cumulative-proportion
// bins. Gains are vs the optional baseline recalls.
std::vector<StratumRow> stratified_eval(
    const std::vector<double>& change_degrees,
    const std::vector<double>& recalls,
    const std::vector<double>* baseline_recalls, std::int64_t strata = 10);

std::string recall_report_csv(const std::vector<RecallRow>& rows);
std::string strata_report_csv(const std::vector<StratumRow>& rows);

}  // namespace tr2
