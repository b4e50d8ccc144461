#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace tr2 {

enum class PredicateCategory { kAttention, kSpatial, kContacting };

struct PredicateClass {
  std::string name;
  std::string surface_form;  // as used in prompts, e.g. "sitting on"
  PredicateCategory category = PredicateCategory::kAttention;
};

struct Vocabulary {
  std::vector<std::string> entity_classes;
  std::vector<PredicateClass> predicate_classes;

  std::int64_t entity_count() const {
    return static_cast<std::int64_t>(entity_classes.size());
  }
  std::int64_t predicate_count() const {
    return static_cast<std::int64_t>(predicate_classes.size());
  }
  std::vector<std::int64_t> predicates_in(PredicateCategory cat) const;
  void validate() const;

  // AG-style default: 36 entity classes, 26 predicates split 3/6/17 over
  // attention/spatial/contacting. Smaller counts take prefixes per category.
  static Vocabulary default_vocab(std::int64_t entities = 36,
                                  std::int64_t attention = 3,
                                  std::int64_t spatial = 6,
                                  std::int64_t contacting = 17);
};

struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  void validate() const;
  double area() const { return (x2 - x1) * (y2 - y1); }
  bool contains(const BoundingBox& other) const;
};

BoundingBox union_box(const BoundingBox& a, const BoundingBox& b);
double iou(const BoundingBox& a, const BoundingBox& b);

struct EntityInstance {
  std::int64_t instance_id = 0;
  std::int64_t class_id = 0;
  BoundingBox box;
  std::vector<double> class_scores;  // distribution over entity classes
  std::vector<double> visual_feature;
};

struct RelationEdge {
  std::int64_t subject_id = 0;
  std::int64_t object_id = 0;
  std::set<std::int64_t> labels;  // predicate ids, multi-label
};

struct FrameGraph {
  std::int64_t frame_index = 0;
  std::vector<EntityInstance> entities;
  std::vector<RelationEdge> edges;

  const EntityInstance* find_entity(std::int64_t instance_id) const;
};

struct VideoSample {
  std::string video_id;
  std::vector<FrameGraph> frames;

  std::int64_t length() const {
    return static_cast<std::int64_t>(frames.size());
  }
  void validate() const;
};

// Fraction of adjacent frame transitions whose labeled relation structure
// differs: a pair appearing/disappearing counts as change, as does any label
// set mutation. Returns 0 for single-frame videos.
double change_degree(const VideoSample& v);

// Line-oriented dataset format:
//   #video <id> <T>
//   #frame <t>
//   E <instance_id> <class_id> <x1> <y1> <x2> <y2> <d_v floats...>
//   R <subj_id> <obj_id> <pred,pred,...>
// Floats are printed with 9 significant digits. Parsing errors carry the
// offending line number. class_scores are not part of the format; parsed
// entities get a one-hot distribution from class_id (entity_class_count
// must be supplied for that).
std::string serialize_dataset(const std::vector<VideoSample>& videos);
std::vector<VideoSample> parse_dataset(const std::string& text,
                                       std::int64_t entity_class_count);
void write_dataset(const std::vector<VideoSample>& videos,
                   const std::string& path);
std::vector<VideoSample> read_dataset(const std::string& path,
                                      std::int64_t entity_class_count);

// 9-significant-digit float formatting shared by all text emitters.
std::string fmt_float(double v);

}  // namespace tr2
