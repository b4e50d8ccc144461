#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "doctest.h"
#include "tr2/fusion.hpp"
#include "tr2/guidance.hpp"
#include "tr2/synth.hpp"

using namespace tr2;

namespace {

// One pair over `frame_index` positions with a constant-valued e_r matrix.
PairSequence manual_sequence(Tape& tape, std::vector<std::int64_t> frames,
                             std::vector<double> e_r_values,
                             std::int64_t d_er) {
  PairSequence seq;
  seq.key = {0, 1};
  seq.frame_index = frames;
  seq.frame_pos = std::move(frames);
  seq.e_r = tape.constant(
      static_cast<std::int64_t>(seq.frame_pos.size()), d_er,
      std::move(e_r_values));
  return seq;
}

GuidanceTargets manual_targets(std::int64_t t, std::int64_t d_text) {
  GuidanceTargets targets;
  targets.d_text = d_text;
  targets.e_s = {std::vector<std::vector<double>>(
      t, std::vector<double>(d_text, 0.0))};
  targets.labeled = {std::vector<bool>(t, true)};
  targets.changed = {std::vector<bool>(t, false)};
  return targets;
}

ParamStore identity_guidance(std::int64_t d_er, std::int64_t d_text) {
  ParamStore store;
  Tensor w = Tensor::zeros(d_er, d_text);
  for (std::int64_t i = 0; i < std::min(d_er, d_text); ++i) {
    w.data[i * d_text + i] = 1.0;
  }
  w.requires_grad = true;
  store.create("guidance.proj.w", w);
  store.create("guidance.proj.b", Tensor::zeros(1, d_text)).requires_grad =
      true;
  store.create("guidance.bin.w", Tensor::zeros(d_er, 1)).requires_grad = true;
  store.create("guidance.bin.b", Tensor::zeros(1, 1)).requires_grad = true;
  return store;
}

}  // namespace

TEST_CASE("prompt construction") {
  PromptTemplate tmpl;
  CHECK(build_prompt(tmpl, "person", "sitting on", "bed") ==
        "a photo of a person sitting on a bed");
  CHECK(build_prompt(tmpl, "person", "lying on", "sofa") ==
        "a photo of a person lying on a sofa");
  CHECK(build_prompt(tmpl, "Person", "  Holding ", "CUP") ==
        "a photo of a person holding a cup");
  CHECK_THROWS(build_prompt(tmpl, "", "holding", "cup"));

  PromptTemplate missing{"a {subject} does {predicate}"};
  CHECK_THROWS(missing.validate());
  PromptTemplate doubled{"{subject} {subject} {predicate} {object}"};
  CHECK_THROWS(doubled.validate());
}

TEST_CASE("stub text provider is deterministic and unit norm") {
  StubTextProvider p(64);
  const auto a = p.embed("a photo of a person holding a cup");
  const auto b = p.embed("a photo of a person holding a cup");
  const auto c = p.embed("a photo of a person holding a dish");
  CHECK(a == b);
  CHECK(a != c);
  REQUIRE(a.size() == 64);
  double norm2 = 0.0;
  for (double x : a) norm2 += x * x;
  CHECK(norm2 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("file text provider round-trips and names misses") {
  FileTextProvider p;
  p.insert("a photo of a person holding a cup", {1.0, 2.0, 3.0});
  p.insert("a photo of a person behind a table", {-1.0, 0.5, 0.0});
  const std::string path = "/tmp/tr2_test_embed.tsv";
  p.write(path);
  FileTextProvider loaded(path);
  CHECK(loaded.dim() == 3);
  CHECK(loaded.embed("a photo of a person holding a cup") ==
        std::vector<double>{1.0, 2.0, 3.0});
  try {
    loaded.embed("a photo of a person eating a cake");
    FAIL("expected miss");
  } catch (const std::exception& ex) {
    CHECK(std::string(ex.what()).find("eating a cake") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("pair sentence embedding averages one prompt per predicate") {
  GenConfig gen;
  gen.seed = 5;
  gen.num_videos = 1;
  gen.frames_per_video = 2;
  gen.pairs_per_frame = 1;
  gen.entity_class_count = 4;
  gen.attention_predicates = 2;
  gen.spatial_predicates = 1;
  gen.contacting_predicates = 1;
  gen.d_v = 4;
  gen.d_clip = 4;
  const Vocabulary vocab = gen.vocabulary();
  SynthDataset data = generate(gen);
  const FrameGraph& frame = data.videos[0].frames[0];
  const RelationEdge& edge = frame.edges[0];
  StubTextProvider provider(16);
  PromptTemplate tmpl;
  const auto got = pair_sentence_embedding(frame, {0, edge.object_id}, vocab,
                                           provider, tmpl);
  std::vector<double> expect(16, 0.0);
  for (auto pred : edge.labels) {
    const auto v = provider.embed(build_prompt(
        tmpl, vocab.entity_classes[0],
        vocab.predicate_classes[pred].surface_form,
        vocab.entity_classes[frame.find_entity(edge.object_id)->class_id]));
    for (size_t i = 0; i < expect.size(); ++i) {
      expect[i] += v[i] / static_cast<double>(edge.labels.size());
    }
  }
  REQUIRE(got.size() == expect.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("temporal-difference loss hand-computed scalar case") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  auto seq = manual_sequence(tape, {0, 1}, {1.0, 3.0}, 1);
  GuidanceTargets targets = manual_targets(2, 1);
  targets.e_s[0][0] = {0.0};
  targets.e_s[0][1] = {1.0};
  // projected diff = 2, target diff = 1, one transition: loss = (2-1)^2 = 1
  GuidanceLoss loss = guidance_loss(tape, store, {seq}, targets);
  CHECK(loss.contributions == 1);
  CHECK(tape.scalar(loss.loss) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("direct distillation hand-computed scalar case") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  auto seq = manual_sequence(tape, {0, 1}, {1.0, 3.0}, 1);
  GuidanceTargets targets = manual_targets(2, 1);
  targets.e_s[0][0] = {0.0};
  targets.e_s[0][1] = {1.0};
  // residuals 1 and 2 over two labeled frames: (1 + 4) / 2
  GuidanceLoss loss = guidance_loss_direct(tape, store, {seq}, targets);
  CHECK(loss.contributions == 2);
  CHECK(tape.scalar(loss.loss) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("constant target shift separates the two guidance forms") {
  GenConfig gen;
  gen.seed = 9;
  gen.num_videos = 1;
  gen.frames_per_video = 4;
  gen.pairs_per_frame = 2;
  gen.entity_class_count = 5;
  gen.attention_predicates = 2;
  gen.spatial_predicates = 1;
  gen.contacting_predicates = 1;
  gen.d_v = 4;
  gen.d_clip = 4;
  FusionConfig fcfg;
  fcfg.d_model = 6;
  fcfg.spatial_layers = 1;
  fcfg.temporal_layers = 1;
  fcfg.heads = 2;
  fcfg.ff_dim = 8;
  fcfg.dropout = 0.0;
  fcfg.max_temporal_positions = 8;
  fcfg.d_sem = 4;
  const std::int64_t d_text = 8;

  SynthDataset data = generate(gen);
  const Vocabulary vocab = gen.vocabulary();
  std::mt19937_64 rng(31);
  ParamStore store;
  ModelDims dims{gen.d_v, gen.d_clip, gen.entity_class_count,
                 gen.predicate_class_count()};
  init_fusion_params(store, fcfg, dims, rng);
  init_guidance_params(store, 2 * fcfg.d_model, d_text, rng);

  StubTextProvider provider(d_text);
  const auto plans = video_pair_plans(data.videos[0], Task::kPredCls);
  GuidanceTargets targets = build_guidance_targets(
      data.videos[0], plans, vocab, provider, PromptTemplate{});
  GuidanceTargets shifted = targets;
  for (auto& pos : shifted.e_s[0]) {
    for (size_t i = 0; i < pos.size(); ++i) pos[i] += 0.37;
  }

  auto eval = [&](const GuidanceTargets& t, bool direct) {
    Tape tape;
    FusionOutput fused =
        fuse_video(tape, store, fcfg, data.videos[0], data.embeddings,
                   Task::kPredCls, AblationFlags{}, DropoutCtx{});
    GuidanceLoss l = direct
                         ? guidance_loss_direct(tape, store, fused.pairs, t)
                         : guidance_loss(tape, store, fused.pairs, t);
    return tape.scalar(l.loss);
  };
  CHECK(std::abs(eval(targets, false) - eval(shifted, false)) < 1e-12);
  CHECK(std::abs(eval(targets, true) - eval(shifted, true)) > 1e-6);
}

TEST_CASE("transitions across frame gaps or unlabeled frames are excluded") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  SUBCASE("frame index gap") {
    auto seq = manual_sequence(tape, {0, 2, 3}, {1.0, 2.0, 4.0}, 1);
    GuidanceTargets targets = manual_targets(3, 1);
    // only the 2 -> 3 step is adjacent
    std::vector<PairSequencePlan> plans(1);
    plans[0].key = seq.key;
    plans[0].frame_index = seq.frame_index;
    plans[0].frame_pos = seq.frame_pos;
    CHECK(count_transitions(plans, targets) == 1);
    GuidanceLoss loss = guidance_loss(tape, store, {seq}, targets);
    CHECK(loss.contributions == 1);
    CHECK(tape.scalar(loss.loss) == doctest::Approx(4.0).epsilon(1e-12));
  }
  SUBCASE("unlabeled end of a transition") {
    auto seq = manual_sequence(tape, {0, 1, 2}, {1.0, 2.0, 4.0}, 1);
    GuidanceTargets targets = manual_targets(3, 1);
    targets.labeled[0][1] = false;
    // both transitions touch the unlabeled middle frame
    GuidanceLoss loss = guidance_loss(tape, store, {seq}, targets);
    CHECK(loss.empty);
    CHECK(tape.scalar(loss.loss) == 0.0);
    CHECK(count_labeled_frames(targets) == 2);
  }
}

TEST_CASE("binary change loss equals ln 2 at zero logits") {
  Tape tape;
  ParamStore store = identity_guidance(4, 4);
  auto seq = manual_sequence(tape, {0, 1, 2},
                             {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}, 4);
  GuidanceTargets targets = manual_targets(3, 4);
  targets.changed[0][1] = true;
  GuidanceLoss loss = binary_change_loss(tape, store, {seq}, targets);
  CHECK(loss.contributions == 2);
  CHECK(tape.scalar(loss.loss) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("binary change loss scalar oracle with nonzero weights") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  store.get("guidance.bin.w").data = {2.0};
  store.get("guidance.bin.b").data = {-0.5};
  // delta e_r = 1.5, logit = 2*1.5 - 0.5 = 2.5
  auto seq = manual_sequence(tape, {0, 1}, {0.5, 2.0}, 1);
  GuidanceTargets targets = manual_targets(2, 1);
  targets.changed[0][1] = true;
  const double p = 1.0 / (1.0 + std::exp(-2.5));
  GuidanceLoss loss = binary_change_loss(tape, store, {seq}, targets);
  CHECK(tape.scalar(loss.loss) ==
        doctest::Approx(-std::log(p)).epsilon(1e-12));
}

TEST_CASE("binary change loss survives saturated probabilities") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  store.get("guidance.bin.w").data = {1000.0};
  auto seq = manual_sequence(tape, {0, 1}, {0.0, 1.0}, 1);
  GuidanceTargets targets = manual_targets(2, 1);
  // wrong, confident prediction: clamped log keeps the loss finite
  GuidanceLoss loss = binary_change_loss(tape, store, {seq}, targets);
  CHECK(std::isfinite(tape.scalar(loss.loss)));
  CHECK(tape.scalar(loss.loss) > 10.0);
}

TEST_CASE("empty sequences produce a flagged zero loss") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  GuidanceTargets targets;
  targets.d_text = 1;
  for (auto* fn : {&guidance_loss, &guidance_loss_direct,
                   &binary_change_loss}) {
    GuidanceLoss loss = (*fn)(tape, store, {}, targets, -1);
    CHECK(loss.empty);
    CHECK(loss.contributions == 0);
    CHECK(tape.scalar(loss.loss) == 0.0);
  }
}

TEST_CASE("batch norm override rescales the mean") {
  Tape tape;
  ParamStore store = identity_guidance(1, 1);
  auto seq = manual_sequence(tape, {0, 1}, {1.0, 3.0}, 1);
  GuidanceTargets targets = manual_targets(2, 1);
  GuidanceLoss one = guidance_loss(tape, store, {seq}, targets, -1);
  GuidanceLoss four = guidance_loss(tape, store, {seq}, targets, 4);
  CHECK(tape.scalar(one.loss) ==
        doctest::Approx(4.0 * tape.scalar(four.loss)).epsilon(1e-12));
}
