#include "tr2/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

bool triplet_order(const ScoredTriplet& a, const ScoredTriplet& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.pair != b.pair) return a.pair < b.pair;
  return a.predicate < b.predicate;
}

bool boxes_equal(const BoundingBox& a, const BoundingBox& b) {
  return a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2;
}

bool compatible(const ScoredTriplet& p, const GroundTruthTriplet& g,
                const EvalConfig& cfg) {
  if (p.predicate != g.predicate) return false;
  switch (cfg.task) {
    case Task::kPredCls:
      return p.pair.subject_id == g.subject_id &&
             p.pair.object_id == g.object_id;
    case Task::kSgCls:
      return p.subject_class == g.subject_class &&
             p.object_class == g.object_class &&
             boxes_equal(p.subject_box, g.subject_box) &&
             boxes_equal(p.object_box, g.object_box);
    case Task::kSgDet:
      return p.subject_class == g.subject_class &&
             p.object_class == g.object_class &&
             iou(p.subject_box, g.subject_box) >= cfg.iou_threshold &&
             iou(p.object_box, g.object_box) >= cfg.iou_threshold;
  }
  return false;
}

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::kPredCls: return "PredCls";
    case Task::kSgCls: return "SgCls";
    case Task::kSgDet: return "SgDet";
  }
  return "?";
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kWithConstraints: return "with_constraints";
    case Strategy::kNoConstraints: return "no_constraints";
    case Strategy::kTopK: return "top_k";
  }
  return "?";
}

void EvalConfig::validate() const {
  if (recall_ks.empty()) fail("at least one K required");
  for (size_t i = 1; i < recall_ks.size(); ++i) {
    if (recall_ks[i] <= recall_ks[i - 1]) fail("K list must be ascending");
  }
  if (recall_ks.front() < 1) fail("K must be positive");
  if (top_k < 1) fail("top_k must be >= 1");
  if (no_constraints_budget < 1) fail("frame budget must be >= 1");
  if (iou_threshold <= 0.0 || iou_threshold > 1.0) {
    fail("IoU threshold must lie in (0,1]");
  }
}

std::vector<GroundTruthTriplet> ground_truth_triplets(
    const FrameGraph& frame) {
  std::vector<GroundTruthTriplet> out;
  for (const auto& e : frame.edges) {
    const EntityInstance* s = frame.find_entity(e.subject_id);
    const EntityInstance* o = frame.find_entity(e.object_id);
    if (!s || !o) fail("ground-truth edge references missing entity");
    for (auto pred : e.labels) {
      out.push_back({e.subject_id, e.object_id, s->class_id, o->class_id,
                     s->box, o->box, pred});
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.subject_id, a.object_id, a.predicate) <
           std::tie(b.subject_id, b.object_id, b.predicate);
  });
  return out;
}

std::vector<ScoredTriplet> select_predictions(
    const std::vector<PairPrediction>& pairs, const EvalConfig& cfg) {
  cfg.validate();
  std::vector<ScoredTriplet> out;
  auto emit = [&](const PairPrediction& p, std::int64_t pred) {
    ScoredTriplet t;
    t.pair = p.pair;
    t.subject_class = p.subject_class;
    t.object_class = p.object_class;
    t.subject_box = p.subject_box;
    t.object_box = p.object_box;
    t.predicate = pred;
    t.score = p.subject_score * p.object_score * p.predicate_scores[pred];
    out.push_back(t);
  };
  for (const auto& p : pairs) {
    const std::int64_t np =
        static_cast<std::int64_t>(p.predicate_scores.size());
    if (np == 0) fail("pair prediction without predicate scores");
    switch (cfg.strategy) {
      case Strategy::kWithConstraints: {
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < np; ++j) {
          if (p.predicate_scores[j] > p.predicate_scores[best]) best = j;
        }
        emit(p, best);
        break;
      }
      case Strategy::kNoConstraints: {
        for (std::int64_t j = 0; j < np; ++j) emit(p, j);
        break;
      }
      case Strategy::kTopK: {
        std::vector<std::int64_t> order(np);
        for (std::int64_t j = 0; j < np; ++j) order[j] = j;
        std::sort(order.begin(), order.end(), [&](auto a, auto b) {
          if (p.predicate_scores[a] != p.predicate_scores[b]) {
            return p.predicate_scores[a] > p.predicate_scores[b];
          }
          return a < b;
        });
        for (std::int64_t j = 0; j < std::min(cfg.top_k, np); ++j) {
          emit(p, order[j]);
        }
        break;
      }
    }
  }
  std::sort(out.begin(), out.end(), triplet_order);
  if (cfg.strategy == Strategy::kNoConstraints &&
      static_cast<std::int64_t>(out.size()) > cfg.no_constraints_budget) {
    out.resize(cfg.no_constraints_budget);
  }
  return out;
}

std::optional<std::vector<double>> match_and_recall(
    const std::vector<ScoredTriplet>& predictions,
    const std::vector<GroundTruthTriplet>& gt, const EvalConfig& cfg) {
  cfg.validate();
  if (gt.empty()) return std::nullopt;
  std::vector<double> recalls;
  recalls.reserve(cfg.recall_ks.size());
  for (auto k : cfg.recall_ks) {
    std::vector<bool> matched(gt.size(), false);
    std::int64_t hits = 0;
    const std::int64_t limit =
        std::min<std::int64_t>(k, static_cast<std::int64_t>(predictions.size()));
    for (std::int64_t i = 0; i < limit; ++i) {
      for (size_t g = 0; g < gt.size(); ++g) {
        if (matched[g]) continue;
        if (compatible(predictions[i], gt[g], cfg)) {
          matched[g] = true;
          ++hits;
          break;
        }
      }
    }
    recalls.push_back(static_cast<double>(hits) /
                      static_cast<double>(gt.size()));
  }
  return recalls;
}

std::vector<RecallRow> corpus_recall(
    const std::vector<VideoSample>& videos,
    const std::vector<VideoPredictions>& predictions, const EvalConfig& cfg) {
  cfg.validate();
  if (videos.size() != predictions.size()) {
    fail("corpus_recall: one prediction set per video required");
  }
  std::vector<double> sums(cfg.recall_ks.size(), 0.0);
  std::int64_t frames = 0;
  for (size_t v = 0; v < videos.size(); ++v) {
    if (predictions[v].frames.size() != videos[v].frames.size()) {
      fail("corpus_recall: frame count mismatch for video " +
           videos[v].video_id);
    }
    for (size_t f = 0; f < videos[v].frames.size(); ++f) {
      auto gt = ground_truth_triplets(videos[v].frames[f]);
      auto preds = select_predictions(predictions[v].frames[f].pairs, cfg);
      auto r = match_and_recall(preds, gt, cfg);
      if (!r) continue;
      ++frames;
      for (size_t i = 0; i < sums.size(); ++i) sums[i] += (*r)[i];
    }
  }
  std::vector<RecallRow> rows;
  for (size_t i = 0; i < cfg.recall_ks.size(); ++i) {
    rows.push_back({cfg.task, cfg.strategy, cfg.recall_ks[i],
                    frames > 0 ? sums[i] / static_cast<double>(frames) : 0.0});
  }
  return rows;
}

std::vector<double> per_video_recall(
    const std::vector<VideoSample>& videos,
    const std::vector<VideoPredictions>& predictions, const EvalConfig& cfg,
    std::int64_t k) {
  EvalConfig single = cfg;
  single.recall_ks = {k};
  std::vector<double> out(videos.size(), 0.0);
  for (size_t v = 0; v < videos.size(); ++v) {
    double sum = 0.0;
    std::int64_t frames = 0;
    for (size_t f = 0; f < videos[v].frames.size(); ++f) {
      auto gt = ground_truth_triplets(videos[v].frames[f]);
      auto preds = select_predictions(predictions[v].frames[f].pairs, single);
      auto r = match_and_recall(preds, gt, single);
      if (!r) continue;
      ++frames;
      sum += (*r)[0];
    }
    out[v] = frames > 0 ? sum / static_cast<double>(frames) : 0.0;
  }
  return out;
}

std::vector<StratumRow> stratified_eval(
    const std::vector<double>& change_degrees,
    const std::vector<double>& recalls,
    const std::vector<double>* baseline_recalls, std::int64_t strata) {
  const size_t n = change_degrees.size();
  if (recalls.size() != n || (baseline_recalls && baseline_recalls->size() != n)) {
    fail("stratified_eval: per-video inputs must align");
  }
  if (n == 0) fail("stratified_eval: empty dataset");
  if (strata < 1) fail("stratified_eval: strata must be >= 1");

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return change_degrees[a] < change_degrees[b];
  });

  // boundaries: zero-change block first, then equal cumulative bins
  size_t zero_count = 0;
  while (zero_count < n && change_degrees[order[zero_count]] == 0.0) {
    ++zero_count;
  }
  std::vector<size_t> bounds;
  if (zero_count > 0) bounds.push_back(zero_count);
  const size_t rest = n - zero_count;
  if (rest > 0) {
    for (std::int64_t s = 1; s <= strata; ++s) {
      const size_t end =
          zero_count + static_cast<size_t>(std::llround(
                           static_cast<double>(rest) *
                           static_cast<double>(s) / static_cast<double>(strata)));
      if (bounds.empty() || end > bounds.back()) bounds.push_back(end);
    }
  }

  std::vector<StratumRow> rows;
  size_t start = 0;
  for (size_t end : bounds) {
    StratumRow row;
    row.videos = static_cast<std::int64_t>(end - start);
    row.upper = static_cast<double>(end) / static_cast<double>(n);
    double sum = 0.0, bsum = 0.0;
    for (size_t i = start; i < end; ++i) {
      sum += recalls[order[i]];
      if (baseline_recalls) bsum += (*baseline_recalls)[order[i]];
    }
    row.recall = sum / static_cast<double>(row.videos);
    row.baseline_recall =
        baseline_recalls ? bsum / static_cast<double>(row.videos) : 0.0;
    row.gain = baseline_recalls ? row.recall - row.baseline_recall : 0.0;
    rows.push_back(row);
    start = end;
  }
  return rows;
}

std::string recall_report_csv(const std::vector<RecallRow>& rows) {
  std::ostringstream os;
  os << "task,strategy,K,recall\n";
  for (const auto& r : rows) {
    os << to_string(r.task) << "," << to_string(r.strategy) << "," << r.k
       << "," << fmt_float(r.recall) << "\n";
  }
  return os.str();
}

std::string strata_report_csv(const std::vector<StratumRow>& rows) {
  std::ostringstream os;
  os << "stratum_upper,recall,baseline_recall,gain\n";
  for (const auto& r : rows) {
    os << fmt_float(r.upper) << "," << fmt_float(r.recall) << ","
       << fmt_float(r.baseline_recall) << "," << fmt_float(r.gain) << "\n";
  }
  return os.str();
}

}  // namespace tr2
