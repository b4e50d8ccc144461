#pragma once

#include <compare>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tr2/scenegraph.hpp"
#include "tr2/synth.hpp"
#include "tr2/tensor.hpp"

namespace tr2 {

enum class Task { kPredCls, kSgCls, kSgDet };

struct FusionConfig {
  std::int64_t d_model = 64;
  std::int64_t spatial_layers = 1;
  std::int64_t temporal_layers = 3;
  std::int64_t heads = 8;
  std::int64_t ff_dim = 128;
  double dropout = 0.1;
  std::int64_t max_temporal_positions = 256;
  std::int64_t d_sem = 16;

  void validate() const;
};

struct AblationFlags {
  bool spatial = true;
  bool temporal_decoder = true;
  bool message_token = true;
};

struct DropoutCtx {
  bool train = false;
  std::mt19937_64* rng = nullptr;
};

struct PairKey {
  std::int64_t subject_id = 0;
  std::int64_t object_id = 0;
  auto operator<=>(const PairKey&) const = default;
};

struct ModelDims {
  std::int64_t d_v = 16;
  std::int64_t d_clip = 32;
  std::int64_t entity_classes = 36;
  std::int64_t predicate_classes = 26;
};

// Creates every fusion parameter under the "fusion." prefix.
void init_fusion_params(ParamStore& store, const FusionConfig& cfg,
                        const ModelDims& dims, std::mt19937_64& rng);

// Candidate pairs for one frame: the labeled ground-truth pairs for
// training / PredCls / SgCls, all (person, object) detection pairs for
// SgDet. Always sorted by (subject_id, object_id).
std::vector<PairKey> candidate_pairs(const FrameGraph& frame, Task task);

struct AssembledFrame {
  std::int64_t frame_pos = 0;    // index into video.frames
  std::int64_t frame_index = 0;  // absolute temporal index
  std::vector<PairKey> pairs;    // row order of x
  Tape::Ref x;                   // [n_pairs, d_model]
};

// Detector features + cropped-region embedding + learned class semantics,
// concatenated and projected to d_model. Frames with no candidate pairs are
// skipped and noted.
std::vector<AssembledFrame> assemble_inputs(
    Tape& tape, ParamStore& store, const FusionConfig& cfg,
    const VideoSample& video, const ClipEmbeddings& embeddings, Task task,
    std::vector<std::string>* notes = nullptr);

// Intra-frame self-attention encoder, no positional encoding.
Tape::Ref spatial_encode(Tape& tape, ParamStore& store,
                         const FusionConfig& cfg, Tape::Ref x,
                         const DropoutCtx& dctx);

struct PairSequencePlan {
  PairKey key;
  // (index into the assembled-frame list, row within that frame's matrix)
  std::vector<std::pair<std::int64_t, std::int64_t>> locs;
  std::vector<std::int64_t> frame_pos;
  std::vector<std::int64_t> frame_index;
};

// Rearrangement by entity pair and time; the plan alone inverts exactly.
std::vector<PairSequencePlan> rearrange_by_pair(
    const std::vector<AssembledFrame>& frames);

// Same plans computed without a tape, from candidate pairs alone. Matches
// rearrange_by_pair over the assembled (non-empty) frames exactly.
std::vector<PairSequencePlan> video_pair_plans(const VideoSample& video,
                                               Task task);

Tape::Ref gather_pair_sequence(Tape& tape,
                               const std::vector<AssembledFrame>& frames,
                               const PairSequencePlan& plan);

// Causal decoder over one pair's sequence, learned temporal position
// embeddings indexed by absolute frame index.
Tape::Ref temporal_decode(Tape& tape, ParamStore& store,
                          const FusionConfig& cfg, Tape::Ref seq,
                          const std::vector<std::int64_t>& positions,
                          const DropoutCtx& dctx);

struct MessageFused {
  Tape::Ref e_r;    // [T, 2*d_model]
  Tape::Ref gates;  // [T, d_model]; row t holds m_{t-1} (row 0 is unused
                    //   since the previous feature is the zero vector)
};

MessageFused message_fuse(Tape& tape, ParamStore& store,
                          const FusionConfig& cfg, Tape::Ref e_f);

struct PairSequence {
  PairKey key;
  std::vector<std::int64_t> frame_pos;
  std::vector<std::int64_t> frame_index;
  Tape::Ref e_f;    // [T_pair, d_model]
  Tape::Ref e_r;    // [T_pair, 2*d_model]
  Tape::Ref gates;  // [T_pair, d_model]
};

struct FusionOutput {
  std::vector<PairSequence> pairs;  // sorted by key
  std::vector<std::string> notes;
};

// Full pipeline for one video under the given ablation flags.
FusionOutput fuse_video(Tape& tape, ParamStore& store,
                        const FusionConfig& cfg, const VideoSample& video,
                        const ClipEmbeddings& embeddings, Task task,
                        const AblationFlags& flags, const DropoutCtx& dctx);

}  // namespace tr2
