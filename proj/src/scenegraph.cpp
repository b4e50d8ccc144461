#include "tr2/scenegraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

const char* const kEntityNames[36] = {
    "person",  "bag",     "bed",          "blanket", "book",     "box",
    "broom",   "chair",   "closet",       "clothes", "cup",      "dish",
    "door",    "doorknob", "doorway",     "floor",   "food",     "groceries",
    "laptop",  "light",   "medicine",     "mirror",  "paper",    "phone",
    "picture", "pillow",  "refrigerator", "sandwich", "shelf",   "shoe",
    "sofa",    "table",   "television",   "towel",   "vacuum",   "window"};

struct PredDef {
  const char* name;
  PredicateCategory cat;
};

const PredDef kPredicateDefs[26] = {
    {"looking_at", PredicateCategory::kAttention},
    {"not_looking_at", PredicateCategory::kAttention},
    {"unsure", PredicateCategory::kAttention},
    {"above", PredicateCategory::kSpatial},
    {"beneath", PredicateCategory::kSpatial},
    {"in_front_of", PredicateCategory::kSpatial},
    {"behind", PredicateCategory::kSpatial},
    {"on_the_side_of", PredicateCategory::kSpatial},
    {"in", PredicateCategory::kSpatial},
    {"carrying", PredicateCategory::kContacting},
    {"covered_by", PredicateCategory::kContacting},
    {"drinking_from", PredicateCategory::kContacting},
    {"eating", PredicateCategory::kContacting},
    {"holding", PredicateCategory::kContacting},
    {"leaning_on", PredicateCategory::kContacting},
    {"lying_on", PredicateCategory::kContacting},
    {"not_contacting", PredicateCategory::kContacting},
    {"sitting_on", PredicateCategory::kContacting},
    {"standing_on", PredicateCategory::kContacting},
    {"touching", PredicateCategory::kContacting},
    {"twisting", PredicateCategory::kContacting},
    {"wearing", PredicateCategory::kContacting},
    {"wiping", PredicateCategory::kContacting},
    {"writing_on", PredicateCategory::kContacting},
    {"have_it_on_the_back", PredicateCategory::kContacting},
    {"other_relationship", PredicateCategory::kContacting}};

std::string surface_of(std::string name) {
  std::replace(name.begin(), name.end(), '_', ' ');
  return name;
}

}  // namespace

std::string fmt_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<std::int64_t> Vocabulary::predicates_in(
    PredicateCategory cat) const {
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < predicate_count(); ++i) {
    if (predicate_classes[i].category == cat) out.push_back(i);
  }
  return out;
}

void Vocabulary::validate() const {
  std::set<std::string> seen;
  for (const auto& n : entity_classes) {
    if (!seen.insert(n).second) fail("duplicate entity class name: " + n);
  }
  seen.clear();
  for (const auto& p : predicate_classes) {
    if (!seen.insert(p.name).second) {
      fail("duplicate predicate name: " + p.name);
    }
    if (p.surface_form.empty()) {
      fail("predicate has empty surface form: " + p.name);
    }
  }
}

Vocabulary Vocabulary::default_vocab(std::int64_t entities,
                                     std::int64_t attention,
                                     std::int64_t spatial,
                                     std::int64_t contacting) {
  if (entities <= 0 || attention < 0 || spatial < 0 || contacting < 0 ||
      attention + spatial + contacting <= 0) {
    fail("vocabulary sizes must be positive");
  }
  Vocabulary v;
  for (std::int64_t i = 0; i < entities; ++i) {
    v.entity_classes.push_back(i < 36 ? kEntityNames[i]
                                      : "entity" + std::to_string(i));
  }
  auto take = [&](PredicateCategory cat, std::int64_t n) {
    std::int64_t got = 0;
    for (const auto& d : kPredicateDefs) {
      if (got >= n) break;
      if (d.cat != cat) continue;
      v.predicate_classes.push_back({d.name, surface_of(d.name), cat});
      ++got;
    }
    for (; got < n; ++got) {
      std::string name = "predicate" + std::to_string(v.predicate_classes.size());
      v.predicate_classes.push_back({name, surface_of(name), cat});
    }
  };
  take(PredicateCategory::kAttention, attention);
  take(PredicateCategory::kSpatial, spatial);
  take(PredicateCategory::kContacting, contacting);
  v.validate();
  return v;
}

void BoundingBox::validate() const {
  if (!(x1 < x2) || !(y1 < y2)) {
    fail("invalid box: x1 < x2 and y1 < y2 required");
  }
  if (x1 < 0 || y1 < 0 || x2 > 1 || y2 > 1) {
    fail("box coordinates must lie in [0,1]");
  }
}

bool BoundingBox::contains(const BoundingBox& o) const {
  return x1 <= o.x1 && y1 <= o.y1 && x2 >= o.x2 && y2 >= o.y2;
}

BoundingBox union_box(const BoundingBox& a, const BoundingBox& b) {
  a.validate();
  b.validate();
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  a.validate();
  b.validate();
  const double ix = std::max(
      0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(
      0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

const EntityInstance* FrameGraph::find_entity(std::int64_t instance_id) const {
  for (const auto& e : entities) {
    if (e.instance_id == instance_id) return &e;
  }
  return nullptr;
}

void VideoSample::validate() const {
  if (frames.empty()) fail("video must have at least one frame");
  std::int64_t prev = -1;
  for (const auto& f : frames) {
    if (f.frame_index <= prev) fail("frame indices must strictly increase");
    prev = f.frame_index;
    std::set<std::int64_t> ids;
    for (const auto& e : f.entities) {
      e.box.validate();
      if (!ids.insert(e.instance_id).second) {
        fail("duplicate instance id in frame");
      }
    }
    std::set<std::pair<std::int64_t, std::int64_t>> pairs;
    for (const auto& r : f.edges) {
      if (r.subject_id == r.object_id) fail("self-relation not allowed");
      if (r.labels.empty()) fail("ground-truth edge with empty label set");
      if (!ids.count(r.subject_id) || !ids.count(r.object_id)) {
        fail("edge endpoint missing from frame entities");
      }
      if (!pairs.insert({r.subject_id, r.object_id}).second) {
        fail("duplicate ordered pair in frame");
      }
    }
  }
}

double change_degree(const VideoSample& v) {
  if (v.length() <= 1) return 0.0;
  auto edge_map = [](const FrameGraph& f) {
    std::map<std::pair<std::int64_t, std::int64_t>, std::set<std::int64_t>> m;
    for (const auto& e : f.edges) m[{e.subject_id, e.object_id}] = e.labels;
    return m;
  };
  std::int64_t changed = 0;
  auto prev = edge_map(v.frames[0]);
  for (std::int64_t t = 1; t < v.length(); ++t) {
    auto cur = edge_map(v.frames[t]);
    if (cur != prev) ++changed;
    prev = std::move(cur);
  }
  return static_cast<double>(changed) / static_cast<double>(v.length() - 1);
}

std::string serialize_dataset(const std::vector<VideoSample>& videos) {
  std::ostringstream os;
  for (const auto& v : videos) {
    os << "#video " << v.video_id << " " << v.length() << "\n";
    for (const auto& f : v.frames) {
      os << "#frame " << f.frame_index << "\n";
      for (const auto& e : f.entities) {
        os << "E " << e.instance_id << " " << e.class_id << " "
           << fmt_float(e.box.x1) << " " << fmt_float(e.box.y1) << " "
           << fmt_float(e.box.x2) << " " << fmt_float(e.box.y2);
        for (double x : e.visual_feature) os << " " << fmt_float(x);
        os << "\n";
      }
      for (const auto& r : f.edges) {
        os << "R " << r.subject_id << " " << r.object_id << " ";
        bool first = true;
        for (auto p : r.labels) {
          if (!first) os << ",";
          os << p;
          first = false;
        }
        os << "\n";
      }
    }
  }
  return os.str();
}

std::vector<VideoSample> parse_dataset(const std::string& text,
                                       std::int64_t entity_class_count) {
  std::vector<VideoSample> videos;
  std::istringstream is(text);
  std::string line;
  std::int64_t lineno = 0;
  auto bad = [&](const std::string& why) -> void {
    throw std::runtime_error("dataset parse error at line " +
                             std::to_string(lineno) + ": " + why);
  };
  VideoSample* video = nullptr;
  FrameGraph* frame = nullptr;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "#video") {
      std::string id;
      std::int64_t t = 0;
      if (!(ls >> id >> t) || t < 1) bad("malformed #video header");
      videos.push_back({});
      video = &videos.back();
      video->video_id = id;
      frame = nullptr;
    } else if (tag == "#frame") {
      if (!video) bad("#frame before #video");
      std::int64_t t = 0;
      if (!(ls >> t)) bad("malformed #frame header");
      video->frames.push_back({});
      frame = &video->frames.back();
      frame->frame_index = t;
    } else if (tag == "E") {
      if (!frame) bad("entity line outside a frame");
      EntityInstance e;
      if (!(ls >> e.instance_id >> e.class_id >> e.box.x1 >> e.box.y1 >>
            e.box.x2 >> e.box.y2)) {
        bad("malformed entity line");
      }
      double x;
      while (ls >> x) e.visual_feature.push_back(x);
      if (!ls.eof()) bad("trailing garbage on entity line");
      if (e.class_id < 0 || e.class_id >= entity_class_count) {
        bad("entity class id out of range");
      }
      e.class_scores.assign(entity_class_count, 0.0);
      e.class_scores[e.class_id] = 1.0;
      frame->entities.push_back(std::move(e));
    } else if (tag == "R") {
      if (!frame) bad("relation line outside a frame");
      RelationEdge r;
      std::string preds;
      if (!(ls >> r.subject_id >> r.object_id >> preds)) {
        bad("malformed relation line");
      }
      std::string extra;
      if (ls >> extra) bad("trailing garbage on relation line");
      std::istringstream ps(preds);
      std::string item;
      while (std::getline(ps, item, ',')) {
        if (item.empty()) bad("empty predicate id");
        try {
          r.labels.insert(std::stoll(item));
        } catch (const std::exception&) {
          bad("non-numeric predicate id '" + item + "'");
        }
      }
      if (r.labels.empty()) bad("relation line with no predicates");
      frame->edges.push_back(std::move(r));
    } else {
      bad("unknown line tag '" + tag + "'");
    }
  }
  for (const auto& v : videos) v.validate();
  return videos;
}

void write_dataset(const std::vector<VideoSample>& videos,
                   const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << serialize_dataset(videos);
}

std::vector<VideoSample> read_dataset(const std::string& path,
                                      std::int64_t entity_class_count) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_dataset(buf.str(), entity_class_count);
}

}  // namespace tr2
