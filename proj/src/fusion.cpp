#include "tr2/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

double xavier_std(std::int64_t fan_in, std::int64_t fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

void create_linear(ParamStore& store, const std::string& prefix,
                   std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
  store.create(prefix + ".w",
               Tensor::randn(in, out, xavier_std(in, out), rng));
  store.create(prefix + ".b", Tensor::zeros(1, out)).requires_grad = true;
}

void create_layer_norm(ParamStore& store, const std::string& prefix,
                       std::int64_t dim) {
  store.create(prefix + ".g",
               Tensor({1, dim}, std::vector<double>(dim, 1.0), true));
  store.create(prefix + ".b", Tensor::zeros(1, dim)).requires_grad = true;
}

void create_block(ParamStore& store, const std::string& prefix,
                  const FusionConfig& cfg, std::mt19937_64& rng) {
  const std::int64_t d = cfg.d_model;
  for (const char* n : {"wq", "wk", "wv", "wo"}) {
    create_linear(store, prefix + "." + n, d, d, rng);
  }
  create_linear(store, prefix + ".ff1", d, cfg.ff_dim, rng);
  create_linear(store, prefix + ".ff2", cfg.ff_dim, d, rng);
  create_layer_norm(store, prefix + ".ln1", d);
  create_layer_norm(store, prefix + ".ln2", d);
}

// Post-norm transformer block shared by the spatial encoder and temporal
// decoder; only the mask differs.
Tape::Ref transformer_block(Tape& tape, ParamStore& store,
                            const std::string& prefix,
                            const FusionConfig& cfg, Tape::Ref x,
                            const std::vector<double>* mask,
                            const DropoutCtx& dctx) {
  auto lin = [&](const std::string& name, Tape::Ref in) {
    return tape.linear(in, tape.param(store, prefix + "." + name + ".w"),
                       tape.param(store, prefix + "." + name + ".b"));
  };
  auto drop = [&](Tape::Ref in) {
    if (!dctx.train || cfg.dropout == 0.0) return in;
    return tape.dropout(in, cfg.dropout, dctx.train, *dctx.rng);
  };
  Tape::Ref q = lin("wq", x);
  Tape::Ref k = lin("wk", x);
  Tape::Ref v = lin("wv", x);
  Tape::Ref att = lin("wo", tape.attention(q, k, v, cfg.heads, mask));
  x = tape.layer_norm(tape.add(x, drop(att)),
                      tape.param(store, prefix + ".ln1.g"),
                      tape.param(store, prefix + ".ln1.b"));
  Tape::Ref ff = lin("ff2", tape.relu(lin("ff1", x)));
  return tape.layer_norm(tape.add(x, drop(ff)),
                         tape.param(store, prefix + ".ln2.g"),
                         tape.param(store, prefix + ".ln2.b"));
}

}  // namespace

void FusionConfig::validate() const {
  if (d_model <= 0 || spatial_layers < 0 || temporal_layers < 0 ||
      heads <= 0 || ff_dim <= 0 || max_temporal_positions <= 0 || d_sem <= 0) {
    fail("fusion config sizes must be positive");
  }
  if (d_model % heads != 0) {
    fail("head count " + std::to_string(heads) +
         " must divide d_model " + std::to_string(d_model));
  }
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0,1)");
}

void init_fusion_params(ParamStore& store, const FusionConfig& cfg,
                        const ModelDims& dims, std::mt19937_64& rng) {
  cfg.validate();
  const std::int64_t in_dim = 2 * dims.d_v + dims.d_clip + 2 * cfg.d_sem;
  create_linear(store, "fusion.input_proj", in_dim, cfg.d_model, rng);
  store.create("fusion.sem_embed",
               Tensor::randn(dims.entity_classes, cfg.d_sem, 0.5, rng));
  store.create("fusion.pos_embed",
               Tensor::randn(cfg.max_temporal_positions, cfg.d_model, 0.02,
                             rng));
  for (std::int64_t l = 0; l < cfg.spatial_layers; ++l) {
    create_block(store, "fusion.spatial." + std::to_string(l), cfg, rng);
  }
  for (std::int64_t l = 0; l < cfg.temporal_layers; ++l) {
    create_block(store, "fusion.temporal." + std::to_string(l), cfg, rng);
  }
  create_linear(store, "fusion.gate.fc1", 2 * cfg.d_model, cfg.d_model, rng);
  create_linear(store, "fusion.gate.fc2", cfg.d_model, cfg.d_model, rng);
}

std::vector<PairKey> candidate_pairs(const FrameGraph& frame, Task task) {
  std::vector<PairKey> pairs;
  if (task == Task::kSgDet) {
    for (const auto& s : frame.entities) {
      if (s.class_id != 0) continue;  // person-centric pairs
      for (const auto& o : frame.entities) {
        if (o.instance_id == s.instance_id) continue;
        pairs.push_back({s.instance_id, o.instance_id});
      }
    }
  } else {
    for (const auto& e : frame.edges) {
      pairs.push_back({e.subject_id, e.object_id});
    }
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

std::vector<AssembledFrame> assemble_inputs(
    Tape& tape, ParamStore& store, const FusionConfig& cfg,
    const VideoSample& video, const ClipEmbeddings& embeddings, Task task,
    std::vector<std::string>* notes) {
  std::vector<AssembledFrame> out;
  Tape::Ref sem = tape.param(store, "fusion.sem_embed");
  for (std::int64_t fp = 0; fp < video.length(); ++fp) {
    const FrameGraph& frame = video.frames[fp];
    auto pairs = candidate_pairs(frame, task);
    if (pairs.empty()) {
      if (notes) {
        notes->push_back("frame " + std::to_string(frame.frame_index) +
                         " skipped: no candidate pairs");
      }
      continue;
    }
    std::vector<double> feat;
    std::vector<std::int64_t> subj_cls, obj_cls;
    for (const auto& p : pairs) {
      const EntityInstance* s = frame.find_entity(p.subject_id);
      const EntityInstance* o = frame.find_entity(p.object_id);
      if (!s || !o) fail("candidate pair references missing entity");
      const auto& clip = embeddings.at(video.video_id, frame.frame_index,
                                       p.subject_id, p.object_id);
      feat.insert(feat.end(), s->visual_feature.begin(),
                  s->visual_feature.end());
      feat.insert(feat.end(), o->visual_feature.begin(),
                  o->visual_feature.end());
      feat.insert(feat.end(), clip.begin(), clip.end());
      subj_cls.push_back(s->class_id);
      obj_cls.push_back(o->class_id);
    }
    const std::int64_t n = static_cast<std::int64_t>(pairs.size());
    const std::int64_t fc = static_cast<std::int64_t>(feat.size()) / n;
    Tape::Ref fixed = tape.constant(n, fc, std::move(feat));
    Tape::Ref x = tape.concat_cols(
        tape.concat_cols(fixed, tape.gather_rows(sem, subj_cls)),
        tape.gather_rows(sem, obj_cls));
    x = tape.linear(x, tape.param(store, "fusion.input_proj.w"),
                    tape.param(store, "fusion.input_proj.b"));
    out.push_back({fp, frame.frame_index, std::move(pairs), x});
  }
  return out;
}

Tape::Ref spatial_encode(Tape& tape, ParamStore& store,
                         const FusionConfig& cfg, Tape::Ref x,
                         const DropoutCtx& dctx) {
  if (tape.rows(x) < 1) fail("spatial_encode: empty frame");
  for (std::int64_t l = 0; l < cfg.spatial_layers; ++l) {
    x = transformer_block(tape, store, "fusion.spatial." + std::to_string(l),
                          cfg, x, nullptr, dctx);
  }
  return x;
}

std::vector<PairSequencePlan> rearrange_by_pair(
    const std::vector<AssembledFrame>& frames) {
  std::map<PairKey, PairSequencePlan> plans;
  for (std::int64_t fi = 0; fi < static_cast<std::int64_t>(frames.size());
       ++fi) {
    const auto& f = frames[fi];
    for (std::int64_t row = 0;
         row < static_cast<std::int64_t>(f.pairs.size()); ++row) {
      auto& plan = plans[f.pairs[row]];
      plan.key = f.pairs[row];
      plan.locs.push_back({fi, row});
      plan.frame_pos.push_back(f.frame_pos);
      plan.frame_index.push_back(f.frame_index);
    }
  }
  std::vector<PairSequencePlan> out;
  out.reserve(plans.size());
  for (auto& [key, plan] : plans) out.push_back(std::move(plan));
  return out;
}

std::vector<PairSequencePlan> video_pair_plans(const VideoSample& video,
                                               Task task) {
  std::vector<AssembledFrame> skeleton;
  for (std::int64_t fp = 0; fp < video.length(); ++fp) {
    auto pairs = candidate_pairs(video.frames[fp], task);
    if (pairs.empty()) continue;
    AssembledFrame f;
    f.frame_pos = fp;
    f.frame_index = video.frames[fp].frame_index;
    f.pairs = std::move(pairs);
    skeleton.push_back(std::move(f));
  }
  return rearrange_by_pair(skeleton);
}

Tape::Ref gather_pair_sequence(Tape& tape,
                               const std::vector<AssembledFrame>& frames,
                               const PairSequencePlan& plan) {
  std::vector<Tape::Ref> rows;
  rows.reserve(plan.locs.size());
  for (const auto& [fi, row] : plan.locs) {
    rows.push_back(tape.slice_rows(frames[fi].x, row, 1));
  }
  return tape.concat_rows(rows);
}

Tape::Ref temporal_decode(Tape& tape, ParamStore& store,
                          const FusionConfig& cfg, Tape::Ref seq,
                          const std::vector<std::int64_t>& positions,
                          const DropoutCtx& dctx) {
  const std::int64_t t = tape.rows(seq);
  if (static_cast<std::int64_t>(positions.size()) != t) {
    fail("temporal_decode: one position per sequence step required");
  }
  for (auto p : positions) {
    if (p < 0 || p >= cfg.max_temporal_positions) {
      fail("temporal position " + std::to_string(p) +
           " exceeds max_temporal_positions " +
           std::to_string(cfg.max_temporal_positions));
    }
  }
  Tape::Ref x = tape.add(
      seq, tape.gather_rows(tape.param(store, "fusion.pos_embed"), positions));
  const auto mask = causal_mask(t);
  for (std::int64_t l = 0; l < cfg.temporal_layers; ++l) {
    x = transformer_block(tape, store, "fusion.temporal." + std::to_string(l),
                          cfg, x, &mask, dctx);
  }
  return x;
}

MessageFused message_fuse(Tape& tape, ParamStore& store,
                          const FusionConfig& cfg, Tape::Ref e_f) {
  const std::int64_t t = tape.rows(e_f);
  const std::int64_t d = tape.cols(e_f);
  Tape::Ref prev;
  if (t == 1) {
    prev = tape.zeros(1, d);
  } else {
    prev = tape.concat_rows(
        {tape.zeros(1, d), tape.slice_rows(e_f, 0, t - 1)});
  }
  Tape::Ref gin = tape.concat_cols(e_f, prev);
  Tape::Ref hidden =
      tape.relu(tape.linear(gin, tape.param(store, "fusion.gate.fc1.w"),
                            tape.param(store, "fusion.gate.fc1.b")));
  Tape::Ref gates = tape.sigmoid(
      tape.linear(hidden, tape.param(store, "fusion.gate.fc2.w"),
                  tape.param(store, "fusion.gate.fc2.b")));
  Tape::Ref e_r = tape.concat_cols(e_f, tape.mul(prev, gates));
  return {e_r, gates};
}

FusionOutput fuse_video(Tape& tape, ParamStore& store,
                        const FusionConfig& cfg, const VideoSample& video,
                        const ClipEmbeddings& embeddings, Task task,
                        const AblationFlags& flags, const DropoutCtx& dctx) {
  FusionOutput out;
  auto frames = assemble_inputs(tape, store, cfg, video, embeddings, task,
                                &out.notes);
  if (flags.spatial) {
    for (auto& f : frames) {
      f.x = spatial_encode(tape, store, cfg, f.x, dctx);
    }
  }
  auto plans = rearrange_by_pair(frames);
  for (const auto& plan : plans) {
    PairSequence seq;
    seq.key = plan.key;
    seq.frame_pos = plan.frame_pos;
    seq.frame_index = plan.frame_index;
    Tape::Ref gathered = gather_pair_sequence(tape, frames, plan);
    seq.e_f = flags.temporal_decoder
                  ? temporal_decode(tape, store, cfg, gathered,
                                    plan.frame_index, dctx)
                  : gathered;
    if (flags.message_token) {
      auto fused = message_fuse(tape, store, cfg, seq.e_f);
      seq.e_r = fused.e_r;
      seq.gates = fused.gates;
    } else {
      const std::int64_t t = tape.rows(seq.e_f);
      seq.e_r = tape.concat_cols(seq.e_f, tape.zeros(t, cfg.d_model));
      seq.gates = tape.zeros(t, cfg.d_model);
    }
    out.pairs.push_back(std::move(seq));
  }
  return out;
}

}  // namespace tr2
