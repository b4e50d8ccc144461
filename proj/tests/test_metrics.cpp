#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <random>
#include <set>
#include <tuple>
#include <vector>

#include "doctest.h"
#include "tr2/metrics.hpp"
#include "recall_oracle.hpp"

using namespace tr2;

using namespace tr2::testutil;

TEST_CASE("selection counts per strategy") {
  std::vector<PairPrediction> pairs = {
      prediction(0, 1, {0.9, 0.1, 0.5, 0.3}),
      prediction(0, 2, {0.2, 0.8, 0.4, 0.6}),
      prediction(0, 3, {0.7, 0.7, 0.1, 0.2})};
  EvalConfig cfg;
  cfg.strategy = Strategy::kWithConstraints;
  CHECK(select_predictions(pairs, cfg).size() == 3);
  cfg.strategy = Strategy::kNoConstraints;
  CHECK(select_predictions(pairs, cfg).size() == 12);
  cfg.no_constraints_budget = 5;
  CHECK(select_predictions(pairs, cfg).size() == 5);
  cfg.strategy = Strategy::kTopK;
  cfg.top_k = 2;
  CHECK(select_predictions(pairs, cfg).size() == 6);
  cfg.top_k = 100;
  CHECK(select_predictions(pairs, cfg).size() == 12);
}

TEST_CASE("selection output is score-sorted with deterministic ties") {
  std::vector<PairPrediction> pairs = {
      prediction(0, 2, {0.5, 0.5, 0.9}),
      prediction(0, 1, {0.9, 0.5, 0.5})};
  EvalConfig cfg;
  cfg.strategy = Strategy::kNoConstraints;
  auto a = select_predictions(pairs, cfg);
  std::swap(pairs[0], pairs[1]);
  auto b = select_predictions(pairs, cfg);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].pair == b[i].pair);
    CHECK(a[i].predicate == b[i].predicate);
    CHECK(a[i].score == b[i].score);
    if (i > 0) CHECK(a[i - 1].score >= a[i].score);
  }
  // within the 0.5 tie block: pair ascending, then predicate ascending
  CHECK(a[0].score == 0.9);
  CHECK(a[1].score == 0.9);
  CHECK((a[2].pair == PairKey{0, 1} && a[2].predicate == 1));
  CHECK((a[3].pair == PairKey{0, 1} && a[3].predicate == 2));
  CHECK((a[4].pair == PairKey{0, 2} && a[4].predicate == 0));
  CHECK((a[5].pair == PairKey{0, 2} && a[5].predicate == 1));
}

TEST_CASE("randomized agreement with an independent matcher") {
  std::mt19937_64 rng(123);
  std::int64_t instances = 0;
  for (int trial = 0; trial < 120; ++trial) {
    FrameGraph frame = random_frame(rng, 2 + rng() % 4);
    if (frame.edges.empty()) continue;
    for (Task task : {Task::kPredCls, Task::kSgCls, Task::kSgDet}) {
      auto pairs = random_predictions(frame, rng, task);
      for (Strategy strat : {Strategy::kWithConstraints,
                             Strategy::kNoConstraints, Strategy::kTopK}) {
        EvalConfig cfg;
        cfg.task = task;
        cfg.strategy = strat;
        cfg.recall_ks = {1, 3, 10, 20};
        cfg.top_k = 3;
        cfg.no_constraints_budget = 12;
        auto gt = ground_truth_triplets(frame);
        auto got = match_and_recall(select_predictions(pairs, cfg), gt, cfg);
        auto want = oracle_recalls(pairs, gt, cfg);
        REQUIRE(got.has_value());
        REQUIRE(got->size() == want.size());
        for (size_t i = 0; i < want.size(); ++i) {
          CHECK((*got)[i] == want[i]);
          ++instances;
        }
      }
    }
  }
  CHECK(instances >= 1000);
}

TEST_CASE("recall saturates once K exceeds the candidate count") {
  std::mt19937_64 rng(7);
  FrameGraph frame = random_frame(rng, 5);
  REQUIRE(!frame.edges.empty());
  auto pairs = random_predictions(frame, rng, Task::kPredCls);
  EvalConfig cfg;
  cfg.recall_ks = {10, 20, 50};
  cfg.strategy = Strategy::kWithConstraints;
  // at most 5 candidate triplets, so every K >= 5 sees all of them
  auto r = match_and_recall(select_predictions(pairs, cfg),
                            ground_truth_triplets(frame), cfg);
  REQUIRE(r.has_value());
  CHECK((*r)[0] == (*r)[1]);
  CHECK((*r)[1] == (*r)[2]);
}

TEST_CASE("top-k with full k and unbounded budget match no-constraints") {
  std::mt19937_64 rng(21);
  FrameGraph frame = random_frame(rng, 4);
  auto pairs = random_predictions(frame, rng, Task::kPredCls);
  EvalConfig a;
  a.strategy = Strategy::kTopK;
  a.top_k = 6;  // equals the predicate count
  EvalConfig b;
  b.strategy = Strategy::kNoConstraints;
  b.no_constraints_budget = 1000;
  auto ta = select_predictions(pairs, a);
  auto tb = select_predictions(pairs, b);
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].pair == tb[i].pair);
    CHECK(ta[i].predicate == tb[i].predicate);
  }
}

TEST_CASE("frames without ground truth are excluded") {
  EvalConfig cfg;
  CHECK(!match_and_recall({}, {}, cfg).has_value());

  VideoSample v;
  v.video_id = "v";
  FrameGraph empty;
  empty.frame_index = 0;
  std::mt19937_64 rng(3);
  FrameGraph full = random_frame(rng, 3);
  full.frame_index = 1;
  v.frames = {empty, full};
  VideoPredictions p;
  p.video_id = "v";
  p.frames.resize(2);
  p.frames[1].pairs = random_predictions(full, rng, Task::kPredCls);
  auto rows = corpus_recall({v}, {p}, cfg);
  REQUIRE(rows.size() == 3);
  // means come from the single non-empty frame, not diluted by the empty one
  EvalConfig single = cfg;
  auto direct = match_and_recall(
      select_predictions(p.frames[1].pairs, single),
      ground_truth_triplets(full), single);
  REQUIRE(direct.has_value());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].recall == (*direct)[i]);
    CHECK(rows[i].k == cfg.recall_ks[i]);
  }
}

TEST_CASE("corpus recall averages per-frame recalls") {
  // two frames with known recalls 1.0 and 0.5
  auto make_frame = [](std::int64_t idx) {
    FrameGraph f;
    f.frame_index = idx;
    for (std::int64_t i = 0; i < 2; ++i) {
      EntityInstance e;
      e.instance_id = i;
      e.class_id = i;
      e.box = box(0.1 * (double)(i + 1), 0.1, 0.5, 0.5);
      e.class_scores = {1.0, 0.0};
      e.visual_feature = {0.0};
      f.entities.push_back(e);
    }
    RelationEdge e;
    e.subject_id = 0;
    e.object_id = 1;
    e.labels = {0, 1};
    f.edges.push_back(e);
    return f;
  };
  VideoSample v;
  v.video_id = "v";
  v.frames = {make_frame(0), make_frame(1)};
  VideoPredictions p;
  p.video_id = "v";
  p.frames.resize(2);
  // frame 0: both labels in the top 2; frame 1: only one of them
  p.frames[0].pairs = {prediction(0, 1, {0.9, 0.8, 0.0})};
  p.frames[1].pairs = {prediction(0, 1, {0.9, 0.0, 0.8})};
  EvalConfig cfg;
  cfg.recall_ks = {2};
  cfg.strategy = Strategy::kNoConstraints;
  auto rows = corpus_recall({v}, {p}, cfg);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].recall == doctest::Approx(0.75).epsilon(1e-12));

  auto per_video = per_video_recall({v}, {p}, cfg, 2);
  REQUIRE(per_video.size() == 1);
  CHECK(per_video[0] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("stratified eval merges zero-change videos and bins the rest") {
  const std::vector<double> degrees = {0.4, 0.0, 0.1, 0.0, 0.3, 0.2};
  const std::vector<double> recalls = {0.9, 0.2, 0.5, 0.4, 0.8, 0.6};
  const std::vector<double> baseline = {0.5, 0.2, 0.4, 0.4, 0.5, 0.5};
  auto rows = stratified_eval(degrees, recalls, &baseline, 2);
  REQUIRE(rows.size() == 3);
  // stratum 1: the two zero-change videos
  CHECK(rows[0].videos == 2);
  CHECK(rows[0].upper == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  CHECK(rows[0].recall == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(rows[0].gain == doctest::Approx(0.0).epsilon(1e-12));
  // stratum 2: degrees 0.1 and 0.2
  CHECK(rows[1].videos == 2);
  CHECK(rows[1].recall == doctest::Approx(0.55).epsilon(1e-12));
  CHECK(rows[1].gain == doctest::Approx(0.55 - 0.45).epsilon(1e-12));
  // stratum 3: degrees 0.3 and 0.4
  CHECK(rows[2].videos == 2);
  CHECK(rows[2].upper == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rows[2].recall == doctest::Approx(0.85).epsilon(1e-12));
  CHECK(rows[2].gain == doctest::Approx(0.85 - 0.5).epsilon(1e-12));

  CHECK_THROWS(stratified_eval({}, {}, nullptr, 10));
  CHECK_THROWS(stratified_eval(degrees, {0.1}, nullptr, 10));
}

TEST_CASE("report csv formats") {
  std::vector<RecallRow> rows = {
      {Task::kPredCls, Strategy::kWithConstraints, 10, 0.5},
      {Task::kSgDet, Strategy::kTopK, 50, 0.25}};
  CHECK(recall_report_csv(rows) ==
        "task,strategy,K,recall\n"
        "PredCls,with_constraints,10,0.5\n"
        "SgDet,top_k,50,0.25\n");
  std::vector<StratumRow> strata = {{0.25, 0.5, 0.4, 0.1, 3}};
  CHECK(strata_report_csv(strata) ==
        "stratum_upper,recall,baseline_recall,gain\n"
        "0.25,0.5,0.4,0.1\n");
}

TEST_CASE("eval config validation") {
  EvalConfig cfg;
  cfg.validate();
  cfg.recall_ks = {10, 10};
  CHECK_THROWS(cfg.validate());
  cfg.recall_ks = {10, 20};
  cfg.top_k = 0;
  CHECK_THROWS(cfg.validate());
  cfg.top_k = 6;
  cfg.iou_threshold = 0.0;
  CHECK_THROWS(cfg.validate());
}
