#include "tr2/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tr2/hash.hpp"
#include "tr2/tensor.hpp"

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

// Unit-norm pseudo-random direction scaled to 1/sqrt(2): independent
// prototypes then sit at expected distance ~1 from each other.
std::vector<double> prototype(std::uint64_t key, std::int64_t dim) {
  std::mt19937_64 rng(key);
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = gauss(rng);
    norm2 += x * x;
  }
  const double s = 1.0 / (std::sqrt(2.0 * norm2) + 1e-300);
  for (auto& x : v) x *= s;
  return v;
}

std::uint64_t labelset_key(std::uint64_t seed, std::int64_t subj_class,
                           const std::set<std::int64_t>& labels,
                           std::int64_t obj_class) {
  std::uint64_t h = hash_mix(seed, 0x636c6970ull);  // "clip"
  h = hash_mix(h, static_cast<std::uint64_t>(subj_class));
  h = hash_mix(h, static_cast<std::uint64_t>(obj_class));
  for (auto l : labels) h = hash_mix(h, static_cast<std::uint64_t>(l) + 101);
  return h;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

BoundingBox jittered(const BoundingBox& b, double jitter,
                     std::mt19937_64& rng) {
  auto j = [&] { return (uniform01(rng) * 2.0 - 1.0) * jitter; };
  BoundingBox out{clamp01(b.x1 + j()), clamp01(b.y1 + j()),
                  clamp01(b.x2 + j()), clamp01(b.y2 + j())};
  // keep a valid nonempty box after clamping
  if (out.x2 <= out.x1) out.x2 = std::min(1.0, out.x1 + 1e-3);
  if (out.y2 <= out.y1) out.y2 = std::min(1.0, out.y1 + 1e-3);
  if (out.x2 <= out.x1) out.x1 = out.x2 - 1e-3;
  if (out.y2 <= out.y1) out.y1 = out.y2 - 1e-3;
  return out;
}

struct Trajectory {
  double cx, cy, w, h, vx, vy;

  BoundingBox at_step() const {
    const double hw = w / 2.0;
    const double hh = h / 2.0;
    const double x = std::clamp(cx, hw, 1.0 - hw);
    const double y = std::clamp(cy, hh, 1.0 - hh);
    return {x - hw, y - hh, x + hw, y + hh};
  }
};

}  // namespace

void GenConfig::validate() const {
  if (num_videos <= 0 || frames_per_video <= 0 || pairs_per_frame <= 0 ||
      entity_class_count <= 0 || d_v <= 0 || d_clip <= 0) {
    fail("generator counts must be positive");
  }
  if (predicate_class_count() <= 0) fail("no predicate classes configured");
  if (change_rate < 0.0 || change_rate > 1.0) {
    fail("change_rate must lie in [0,1]");
  }
  if (class_confusion < 0.0 || class_confusion > 1.0) {
    fail("class_confusion must lie in [0,1]");
  }
  if (sigma_feature < 0.0 || box_jitter < 0.0) {
    fail("noise scales must be non-negative");
  }
}

Vocabulary GenConfig::vocabulary() const {
  return Vocabulary::default_vocab(entity_class_count, attention_predicates,
                                   spatial_predicates, contacting_predicates);
}

const std::vector<double>& ClipEmbeddings::at(const std::string& video_id,
                                              std::int64_t t,
                                              std::int64_t subj,
                                              std::int64_t obj) const {
  auto it = table.find({video_id, t, subj, obj});
  if (it == table.end()) {
    throw std::runtime_error("missing cropped-region embedding for video " +
                             video_id + " frame " + std::to_string(t) +
                             " pair (" + std::to_string(subj) + "," +
                             std::to_string(obj) + ")");
  }
  return it->second;
}

void ClipEmbeddings::write(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "dim " << dim << "\n";
  for (const auto& [key, vec] : table) {
    os << std::get<0>(key) << " " << std::get<1>(key) << " "
       << std::get<2>(key) << " " << std::get<3>(key);
    for (double x : vec) os << " " << fmt_float(x);
    os << "\n";
  }
}

ClipEmbeddings ClipEmbeddings::read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  ClipEmbeddings out;
  std::string line;
  std::int64_t lineno = 0;
  auto bad = [&](const std::string& why) -> void {
    throw std::runtime_error("embedding file error at line " +
                             std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(is, line)) bad("empty file");
  ++lineno;
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> out.dim) || tag != "dim" || out.dim <= 0) {
      bad("expected 'dim <d>' header");
    }
  }
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string vid;
    std::int64_t t, s, o;
    if (!(ls >> vid >> t >> s >> o)) bad("malformed key");
    std::vector<double> vec;
    double x;
    while (ls >> x) vec.push_back(x);
    if (static_cast<std::int64_t>(vec.size()) != out.dim) {
      bad("expected " + std::to_string(out.dim) + " floats");
    }
    out.table[{vid, t, s, o}] = std::move(vec);
  }
  return out;
}

SynthDataset generate(const GenConfig& cfg) {
  cfg.validate();
  const Vocabulary vocab = cfg.vocabulary();
  std::vector<std::vector<std::int64_t>> category_preds = {
      vocab.predicates_in(PredicateCategory::kAttention),
      vocab.predicates_in(PredicateCategory::kSpatial),
      vocab.predicates_in(PredicateCategory::kContacting)};

  SynthDataset out;
  out.videos.resize(cfg.num_videos);
  out.embeddings.dim = cfg.d_clip;
  std::vector<std::map<std::tuple<std::string, std::int64_t, std::int64_t,
                                  std::int64_t>,
                       std::vector<double>>>
      per_video_emb(cfg.num_videos);

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (std::int64_t vi = 0; vi < cfg.num_videos; ++vi) {
    std::mt19937_64 rng(hash_mix(cfg.seed, static_cast<std::uint64_t>(vi)));
    VideoSample video;
    video.video_id = "v" + std::to_string(vi);

    // instance 0 is the person; objects keep their class for the whole video
    const std::int64_t n_entities = cfg.pairs_per_frame + 1;
    std::vector<std::int64_t> classes(n_entities, 0);
    for (std::int64_t e = 1; e < n_entities; ++e) {
      classes[e] = cfg.entity_class_count > 1
                       ? 1 + static_cast<std::int64_t>(
                                 uniform01(rng) *
                                 static_cast<double>(cfg.entity_class_count - 1))
                       : 0;
      classes[e] = std::min(classes[e], cfg.entity_class_count - 1);
    }
    std::vector<Trajectory> traj(n_entities);
    for (auto& tr : traj) {
      tr.w = 0.1 + 0.2 * uniform01(rng);
      tr.h = 0.1 + 0.2 * uniform01(rng);
      tr.cx = uniform01(rng);
      tr.cy = uniform01(rng);
      tr.vx = (uniform01(rng) * 2.0 - 1.0) * 0.02;
      tr.vy = (uniform01(rng) * 2.0 - 1.0) * 0.02;
    }

    // hidden per-pair state: one active predicate per non-empty category
    std::vector<std::vector<std::int64_t>> state(cfg.pairs_per_frame);
    for (auto& s : state) {
      for (const auto& preds : category_preds) {
        if (preds.empty()) continue;
        s.push_back(preds[static_cast<std::int64_t>(
            uniform01(rng) * static_cast<double>(preds.size()))]);
      }
    }

    for (std::int64_t t = 0; t < cfg.frames_per_video; ++t) {
      if (t > 0) {
        for (auto& s : state) {
          std::int64_t slot = 0;
          for (const auto& preds : category_preds) {
            if (preds.empty()) continue;
            if (preds.size() > 1 && uniform01(rng) < cfg.change_rate) {
              // Markov switch to a different predicate of the category
              std::int64_t pick = static_cast<std::int64_t>(
                  uniform01(rng) * static_cast<double>(preds.size() - 1));
              pick = std::min<std::int64_t>(pick, preds.size() - 2);
              std::int64_t chosen = preds[pick];
              if (chosen == s[slot]) chosen = preds[preds.size() - 1];
              s[slot] = chosen;
            }
            ++slot;
          }
        }
      }

      FrameGraph frame;
      frame.frame_index = t;
      for (std::int64_t e = 0; e < n_entities; ++e) {
        EntityInstance inst;
        inst.instance_id = e;
        inst.class_id = classes[e];
        traj[e].cx += traj[e].vx;
        traj[e].cy += traj[e].vy;
        inst.box = jittered(traj[e].at_step(), cfg.box_jitter, rng);

        std::int64_t feat_class = classes[e];
        if (cfg.entity_class_count > 1 &&
            uniform01(rng) < cfg.class_confusion) {
          std::int64_t other = static_cast<std::int64_t>(
              uniform01(rng) * static_cast<double>(cfg.entity_class_count - 1));
          other = std::min(other, cfg.entity_class_count - 2);
          feat_class = other >= classes[e] ? other + 1 : other;
        }
        const auto proto = prototype(
            hash_mix(cfg.seed, hash_mix(0x656e74ull,
                                        static_cast<std::uint64_t>(feat_class))),
            cfg.d_v);
        inst.visual_feature.resize(cfg.d_v);
        for (std::int64_t d = 0; d < cfg.d_v; ++d) {
          inst.visual_feature[d] = proto[d] + cfg.sigma_feature * gauss(rng);
        }
        inst.class_scores.assign(cfg.entity_class_count, 0.0);
        if (cfg.entity_class_count == 1) {
          inst.class_scores[0] = 1.0;
        } else {
          for (auto& s : inst.class_scores) {
            s = 0.1 / static_cast<double>(cfg.entity_class_count - 1);
          }
          inst.class_scores[feat_class] = 0.9;
        }
        frame.entities.push_back(std::move(inst));
      }

      for (std::int64_t p = 0; p < cfg.pairs_per_frame; ++p) {
        RelationEdge edge;
        edge.subject_id = 0;
        edge.object_id = p + 1;
        for (auto pred : state[p]) edge.labels.insert(pred);
        const auto proto = prototype(
            labelset_key(cfg.seed, classes[0], edge.labels, classes[p + 1]),
            cfg.d_clip);
        std::vector<double> emb(cfg.d_clip);
        for (std::int64_t d = 0; d < cfg.d_clip; ++d) {
          emb[d] = proto[d] + cfg.sigma_feature * gauss(rng);
        }
        per_video_emb[vi][{video.video_id, t, edge.subject_id,
                           edge.object_id}] = std::move(emb);
        frame.edges.push_back(std::move(edge));
      }
      video.frames.push_back(std::move(frame));
    }
    out.videos[vi] = std::move(video);
  }

  for (auto& m : per_video_emb) {
    out.embeddings.table.merge(m);
  }
  return out;
}

std::vector<std::int64_t> shuffle_indices(std::int64_t n,
                                          std::mt19937_64& rng) {
  std::vector<std::int64_t> idx(n);
  for (std::int64_t i = 0; i < n; ++i) idx[i] = i;
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::int64_t j = static_cast<std::int64_t>(
        uniform01(rng) * static_cast<double>(i + 1));
    std::swap(idx[i], idx[std::min(j, i)]);
  }
  return idx;
}

std::vector<std::vector<std::int64_t>> split_indices(
    std::int64_t num_videos, const std::vector<double>& ratios,
    std::uint64_t seed) {
  if (num_videos <= 0) fail("split: empty dataset");
  if (ratios.empty()) fail("split: no ratios");
  double sum = 0.0;
  for (double r : ratios) {
    if (r <= 0.0) fail("split: ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail("split: ratios must sum to 1");

  std::mt19937_64 rng(hash_mix(seed, 0x73706c6974ull));  // "split"
  auto order = shuffle_indices(num_videos, rng);
  std::vector<std::vector<std::int64_t>> parts(ratios.size());
  double cum = 0.0;
  std::int64_t start = 0;
  for (size_t p = 0; p < ratios.size(); ++p) {
    cum += ratios[p];
    std::int64_t end =
        p + 1 == ratios.size()
            ? num_videos
            : std::llround(cum * static_cast<double>(num_videos));
    end = std::clamp<std::int64_t>(end, start, num_videos);
    for (std::int64_t i = start; i < end; ++i) parts[p].push_back(order[i]);
    start = end;
  }
  return parts;
}

}  // namespace tr2
