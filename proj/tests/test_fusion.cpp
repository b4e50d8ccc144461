#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tr2/fusion.hpp"
#include "tr2/synth.hpp"

using namespace tr2;

namespace {

FusionConfig small_fusion() {
  FusionConfig cfg;
  cfg.d_model = 6;
  cfg.spatial_layers = 1;
  cfg.temporal_layers = 1;
  cfg.heads = 2;
  cfg.ff_dim = 8;
  cfg.dropout = 0.0;
  cfg.max_temporal_positions = 8;
  cfg.d_sem = 4;
  return cfg;
}

GenConfig small_gen() {
  GenConfig cfg;
  cfg.seed = 77;
  cfg.num_videos = 2;
  cfg.frames_per_video = 4;
  cfg.pairs_per_frame = 2;
  cfg.entity_class_count = 5;
  cfg.attention_predicates = 2;
  cfg.spatial_predicates = 1;
  cfg.contacting_predicates = 1;
  cfg.d_v = 4;
  cfg.d_clip = 4;
  return cfg;
}

ParamStore make_store(const FusionConfig& cfg, const GenConfig& gen,
                      std::uint64_t seed = 123) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  ModelDims dims;
  dims.d_v = gen.d_v;
  dims.d_clip = gen.d_clip;
  dims.entity_classes = gen.entity_class_count;
  dims.predicate_classes = gen.predicate_class_count();
  init_fusion_params(store, cfg, dims, rng);
  return store;
}

const DropoutCtx kEval{false, nullptr};

}  // namespace

TEST_CASE("spatial encoder is permutation equivariant") {
  FusionConfig cfg = small_fusion();
  ParamStore store = make_store(cfg, small_gen());
  std::mt19937_64 rng(9);
  Tensor x = Tensor::randn(4, cfg.d_model, 1.0, rng, false);
  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  Tensor px = Tensor::zeros(4, cfg.d_model);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < cfg.d_model; ++c) {
      px.data[r * cfg.d_model + c] = x.data[perm[r] * cfg.d_model + c];
    }
  }
  Tape t1, t2;
  const auto& y = t1.value(
      spatial_encode(t1, store, cfg, t1.constant_like(x), kEval));
  const auto& py = t2.value(
      spatial_encode(t2, store, cfg, t2.constant_like(px), kEval));
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < cfg.d_model; ++c) {
      CHECK(py[r * cfg.d_model + c] ==
            doctest::Approx(y[perm[r] * cfg.d_model + c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("message fusion matches the direct formula") {
  FusionConfig cfg = small_fusion();
  ParamStore store = make_store(cfg, small_gen());
  const std::int64_t d = cfg.d_model, t = 3;
  std::mt19937_64 rng(15);
  Tensor e_f = Tensor::randn(t, d, 1.0, rng, false);

  Tape tape;
  MessageFused fused = message_fuse(tape, store, cfg, tape.constant_like(e_f));
  const auto& e_r = tape.value(fused.e_r);
  const auto& gates = tape.value(fused.gates);
  REQUIRE(tape.cols(fused.e_r) == 2 * d);

  const auto& w1 = store.get("fusion.gate.fc1.w").data;
  const auto& b1 = store.get("fusion.gate.fc1.b").data;
  const auto& w2 = store.get("fusion.gate.fc2.w").data;
  const auto& b2 = store.get("fusion.gate.fc2.b").data;
  for (std::int64_t i = 0; i < t; ++i) {
    std::vector<double> prev(d, 0.0);
    if (i > 0) {
      for (std::int64_t c = 0; c < d; ++c) prev[c] = e_f.data[(i - 1) * d + c];
    }
    std::vector<double> gin(2 * d);
    for (std::int64_t c = 0; c < d; ++c) {
      gin[c] = e_f.data[i * d + c];
      gin[d + c] = prev[c];
    }
    std::vector<double> hidden(d);
    for (std::int64_t h = 0; h < d; ++h) {
      double s = b1[h];
      for (std::int64_t c = 0; c < 2 * d; ++c) s += gin[c] * w1[c * d + h];
      hidden[h] = std::max(0.0, s);
    }
    for (std::int64_t o = 0; o < d; ++o) {
      double s = b2[o];
      for (std::int64_t h = 0; h < d; ++h) s += hidden[h] * w2[h * d + o];
      const double m = 1.0 / (1.0 + std::exp(-s));
      CHECK(gates[i * d + o] == doctest::Approx(m).epsilon(1e-12));
      CHECK(e_r[i * 2 * d + o] == e_f.data[i * d + o]);
      CHECK(e_r[i * 2 * d + d + o] ==
            doctest::Approx(prev[o] * m).epsilon(1e-12));
    }
  }
  // no previous frame: the gated half is exactly zero
  for (std::int64_t o = 0; o < d; ++o) CHECK(e_r[d + o] == 0.0);
  for (std::int64_t i = 0; i < t * d; ++i) {
    CHECK(gates[i] > 0.0);
    CHECK(gates[i] < 1.0);
  }
}

TEST_CASE("temporal decoder is causal") {
  FusionConfig cfg = small_fusion();
  GenConfig gen = small_gen();
  ParamStore store = make_store(cfg, gen);
  SynthDataset data = generate(gen);
  const VideoSample& a = data.videos[0];
  VideoSample b = a;
  // perturb only the last frame's inputs
  for (auto& e : b.frames.back().entities) {
    for (auto& v : e.visual_feature) v += 0.5;
  }
  Tape t1, t2;
  FusionOutput fa = fuse_video(t1, store, cfg, a, data.embeddings,
                               Task::kPredCls, AblationFlags{}, kEval);
  FusionOutput fb = fuse_video(t2, store, cfg, b, data.embeddings,
                               Task::kPredCls, AblationFlags{}, kEval);
  REQUIRE(fa.pairs.size() == fb.pairs.size());
  for (size_t p = 0; p < fa.pairs.size(); ++p) {
    const auto& va = t1.value(fa.pairs[p].e_r);
    const auto& vb = t2.value(fb.pairs[p].e_r);
    const std::int64_t cols = t1.cols(fa.pairs[p].e_r);
    const std::int64_t t = t1.rows(fa.pairs[p].e_r);
    bool last_differs = false;
    for (std::int64_t i = 0; i < t; ++i) {
      for (std::int64_t c = 0; c < cols; ++c) {
        if (i + 1 < t) {
          CHECK(va[i * cols + c] == vb[i * cols + c]);  // bitwise: same path
        } else if (va[i * cols + c] != vb[i * cols + c]) {
          last_differs = true;
        }
      }
    }
    CHECK(last_differs);
  }
}

TEST_CASE("rearrangement plans invert exactly") {
  GenConfig gen = small_gen();
  SynthDataset data = generate(gen);
  const VideoSample& video = data.videos[0];
  const auto plans = video_pair_plans(video, Task::kPredCls);
  REQUIRE(!plans.empty());
  std::int64_t total = 0;
  for (const auto& plan : plans) {
    REQUIRE(plan.locs.size() == plan.frame_pos.size());
    REQUIRE(plan.locs.size() == plan.frame_index.size());
    for (size_t j = 0; j < plan.locs.size(); ++j) {
      const std::int64_t fp = plan.frame_pos[j];
      const auto pairs = candidate_pairs(video.frames[fp], Task::kPredCls);
      CHECK(pairs[plan.locs[j].second] == plan.key);
      CHECK(video.frames[fp].frame_index == plan.frame_index[j]);
    }
    total += static_cast<std::int64_t>(plan.locs.size());
  }
  std::int64_t expected = 0;
  for (const auto& f : video.frames) {
    expected += static_cast<std::int64_t>(
        candidate_pairs(f, Task::kPredCls).size());
  }
  CHECK(total == expected);
  // same plans as the tape-backed path
  FusionConfig cfg = small_fusion();
  ParamStore store = make_store(cfg, gen);
  Tape tape;
  auto frames = assemble_inputs(tape, store, cfg, video, data.embeddings,
                                Task::kPredCls);
  const auto tape_plans = rearrange_by_pair(frames);
  REQUIRE(tape_plans.size() == plans.size());
  for (size_t p = 0; p < plans.size(); ++p) {
    CHECK(tape_plans[p].key == plans[p].key);
    CHECK(tape_plans[p].locs == plans[p].locs);
    CHECK(tape_plans[p].frame_index == plans[p].frame_index);
  }
}

TEST_CASE("candidate pairs for detection are person-centric and sorted") {
  GenConfig gen = small_gen();
  SynthDataset data = generate(gen);
  const FrameGraph& frame = data.videos[0].frames[0];
  const auto pairs = candidate_pairs(frame, Task::kSgDet);
  REQUIRE(pairs.size() == frame.entities.size() - 1);
  for (const auto& p : pairs) CHECK(p.subject_id == 0);
  CHECK(std::is_sorted(pairs.begin(), pairs.end()));
  const auto gt = candidate_pairs(frame, Task::kPredCls);
  CHECK(std::is_sorted(gt.begin(), gt.end()));
  CHECK(gt.size() == frame.edges.size());
}

TEST_CASE("ablation flags disable stages structurally") {
  FusionConfig cfg = small_fusion();
  GenConfig gen = small_gen();
  ParamStore store = make_store(cfg, gen);
  SynthDataset data = generate(gen);
  const VideoSample& video = data.videos[0];

  SUBCASE("message token off zeroes the gated half") {
    AblationFlags flags;
    flags.message_token = false;
    Tape tape;
    FusionOutput out = fuse_video(tape, store, cfg, video, data.embeddings,
                                  Task::kPredCls, flags, kEval);
    for (const auto& seq : out.pairs) {
      const auto& v = tape.value(seq.e_r);
      const std::int64_t t = tape.rows(seq.e_r);
      for (std::int64_t i = 0; i < t; ++i) {
        for (std::int64_t c = 0; c < cfg.d_model; ++c) {
          CHECK(v[i * 2 * cfg.d_model + cfg.d_model + c] == 0.0);
        }
      }
    }
  }
  SUBCASE("decoder off passes gathered features through unchanged") {
    AblationFlags flags;
    flags.temporal_decoder = false;
    flags.spatial = false;
    flags.message_token = false;
    Tape tape;
    auto frames = assemble_inputs(tape, store, cfg, video, data.embeddings,
                                  Task::kPredCls);
    FusionOutput out = fuse_video(tape, store, cfg, video, data.embeddings,
                                  Task::kPredCls, flags, kEval);
    const auto plans = rearrange_by_pair(frames);
    REQUIRE(out.pairs.size() == plans.size());
    for (size_t p = 0; p < plans.size(); ++p) {
      const auto& ef = tape.value(out.pairs[p].e_f);
      for (size_t j = 0; j < plans[p].locs.size(); ++j) {
        const auto [fi, row] = plans[p].locs[j];
        const auto& fx = tape.value(frames[fi].x);
        for (std::int64_t c = 0; c < cfg.d_model; ++c) {
          CHECK(ef[j * cfg.d_model + c] == fx[row * cfg.d_model + c]);
        }
      }
    }
  }
  SUBCASE("all off leaves frames causally independent") {
    AblationFlags flags{false, false, false};
    VideoSample other = video;
    for (auto& e : other.frames[0].entities) {
      for (auto& v : e.visual_feature) v -= 1.0;
    }
    Tape t1, t2;
    FusionOutput a = fuse_video(t1, store, cfg, video, data.embeddings,
                                Task::kPredCls, flags, kEval);
    FusionOutput b = fuse_video(t2, store, cfg, other, data.embeddings,
                                Task::kPredCls, flags, kEval);
    for (size_t p = 0; p < a.pairs.size(); ++p) {
      const auto& va = t1.value(a.pairs[p].e_r);
      const auto& vb = t2.value(b.pairs[p].e_r);
      const std::int64_t cols = t1.cols(a.pairs[p].e_r);
      // only position 0 (the perturbed frame) may differ
      for (size_t i = cols; i < va.size(); ++i) CHECK(va[i] == vb[i]);
      bool first_differs = false;
      for (std::int64_t c = 0; c < cols; ++c) {
        first_differs = first_differs || va[c] != vb[c];
      }
      CHECK(first_differs);
    }
  }
}

TEST_CASE("temporal positions outside the embedding table are rejected") {
  FusionConfig cfg = small_fusion();
  cfg.max_temporal_positions = 2;
  GenConfig gen = small_gen();
  ParamStore store = make_store(cfg, gen);
  SynthDataset data = generate(gen);  // frame indices up to 3
  Tape tape;
  CHECK_THROWS(fuse_video(tape, store, cfg, data.videos[0], data.embeddings,
                          Task::kPredCls, AblationFlags{}, kEval));
}

TEST_CASE("decoder output depends on the temporal position") {
  FusionConfig cfg = small_fusion();
  ParamStore store = make_store(cfg, small_gen());
  std::mt19937_64 rng(21);
  Tensor x = Tensor::randn(2, cfg.d_model, 1.0, rng, false);
  Tape t1, t2;
  const auto& a = t1.value(
      temporal_decode(t1, store, cfg, t1.constant_like(x), {0, 1}, kEval));
  const auto& b = t2.value(
      temporal_decode(t2, store, cfg, t2.constant_like(x), {2, 3}, kEval));
  CHECK(a != b);
}

TEST_CASE("fusion config validation") {
  FusionConfig cfg = small_fusion();
  cfg.validate();
  SUBCASE("heads must divide d_model") {
    cfg.heads = 4;
    CHECK_THROWS(cfg.validate());
  }
  SUBCASE("dropout below one") {
    cfg.dropout = 1.0;
    CHECK_THROWS(cfg.validate());
  }
}
