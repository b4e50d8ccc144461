#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "tr2/scenegraph.hpp"

namespace tr2 {

struct GenConfig {
  std::uint64_t seed = 0;
  std::int64_t num_videos = 10;
  std::int64_t frames_per_video = 8;
  std::int64_t pairs_per_frame = 3;
  std::int64_t entity_class_count = 36;
  std::int64_t attention_predicates = 3;
  std::int64_t spatial_predicates = 6;
  std::int64_t contacting_predicates = 17;
  double change_rate = 0.3;      // per-transition, per pair-category
  double sigma_feature = 0.3;    // noise std along any direction, separation 1
  double box_jitter = 0.01;      // detector box noise scale
  double class_confusion = 0.0;  // probability a frame's feature is off-class
  std::int64_t d_v = 16;
  std::int64_t d_clip = 32;

  std::int64_t predicate_class_count() const {
    return attention_predicates + spatial_predicates + contacting_predicates;
  }
  void validate() const;
  Vocabulary vocabulary() const;
};

// Per pair-frame cropped-region embeddings, keyed (video_id, t, subj, obj).
struct ClipEmbeddings {
  std::int64_t dim = 0;
  std::map<std::tuple<std::string, std::int64_t, std::int64_t, std::int64_t>,
           std::vector<double>>
      table;

  const std::vector<double>& at(const std::string& video_id, std::int64_t t,
                                std::int64_t subj, std::int64_t obj) const;
  // Sidecar format: "dim <d>" header, then
  // "<video_id> <t> <subj> <obj> <floats...>" per pair-frame.
  void write(const std::string& path) const;
  static ClipEmbeddings read(const std::string& path);
};

struct SynthDataset {
  std::vector<VideoSample> videos;
  ClipEmbeddings embeddings;
};

// Deterministic given the seed; per-video streams are seeded independently,
// so generation order never affects the output.
SynthDataset generate(const GenConfig& config);

// Deterministic Fisher-Yates; unlike std::shuffle the result depends only on
// the rng stream, not the standard library implementation.
std::vector<std::int64_t> shuffle_indices(std::int64_t n,
                                          std::mt19937_64& rng);

// Partitions video indices by shuffled order; ratios must sum to 1.
std::vector<std::vector<std::int64_t>> split_indices(
    std::int64_t num_videos, const std::vector<double>& ratios,
    std::uint64_t seed);

}  // namespace tr2
