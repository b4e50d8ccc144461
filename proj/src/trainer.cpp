#include "tr2/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "tr2/checkpoint.hpp"
#include "tr2/hash.hpp"

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::int64_t parse_int(const std::string& v) {
  size_t pos = 0;
  std::int64_t out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    fail("expected integer, got '" + v + "'");
  }
  if (pos != v.size()) fail("expected integer, got '" + v + "'");
  return out;
}

std::uint64_t parse_uint(const std::string& v) {
  size_t pos = 0;
  std::uint64_t out;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    fail("expected unsigned integer, got '" + v + "'");
  }
  if (pos != v.size() || (!v.empty() && v[0] == '-')) {
    fail("expected unsigned integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& v) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    fail("expected number, got '" + v + "'");
  }
  if (pos != v.size()) fail("expected number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "on") return true;
  if (v == "false" || v == "off") return false;
  fail("expected boolean, got '" + v + "'");
}

Task parse_task(const std::string& v) {
  if (v == "PredCls") return Task::kPredCls;
  if (v == "SgCls") return Task::kSgCls;
  if (v == "SgDet") return Task::kSgDet;
  fail("unknown task '" + v + "'");
}

Strategy parse_strategy(const std::string& v) {
  if (v == "with_constraints") return Strategy::kWithConstraints;
  if (v == "no_constraints") return Strategy::kNoConstraints;
  if (v == "top_k") return Strategy::kTopK;
  fail("unknown strategy '" + v + "'");
}

GuidanceMode parse_guidance(const std::string& v) {
  if (v == "none") return GuidanceMode::kNone;
  if (v == "eq2") return GuidanceMode::kEq2;
  if (v == "eq4") return GuidanceMode::kEq4;
  if (v == "binary") return GuidanceMode::kBinary;
  fail("unknown guidance mode '" + v + "'");
}

std::string fmt_ks(const std::vector<std::int64_t>& ks) {
  std::string out;
  for (size_t i = 0; i < ks.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(ks[i]);
  }
  return out;
}

std::vector<std::int64_t> parse_ks(const std::string& v) {
  std::vector<std::int64_t> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) out.push_back(parse_int(trim(item)));
  if (out.empty()) fail("expected comma-separated integers, got '" + v + "'");
  return out;
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigField>& config_fields() {
  auto i64 = [](const std::string& key, std::int64_t RunConfig::*mem) {
    return ConfigField{
        key,
        [mem](const RunConfig& c) { return std::to_string(c.*mem); },
        [mem](RunConfig& c, const std::string& v) { c.*mem = parse_int(v); }};
  };
  auto str = [](const std::string& key, std::string RunConfig::*mem) {
    return ConfigField{
        key, [mem](const RunConfig& c) { return c.*mem; },
        [mem](RunConfig& c, const std::string& v) { c.*mem = v; }};
  };
  auto sub_i64 = [](const std::string& key, auto sub, auto mem) {
    return ConfigField{key,
                       [sub, mem](const RunConfig& c) {
                         return std::to_string(c.*sub.*mem);
                       },
                       [sub, mem](RunConfig& c, const std::string& v) {
                         c.*sub.*mem = parse_int(v);
                       }};
  };
  auto sub_f64 = [](const std::string& key, auto sub, auto mem) {
    return ConfigField{
        key,
        [sub, mem](const RunConfig& c) { return fmt_double(c.*sub.*mem); },
        [sub, mem](RunConfig& c, const std::string& v) {
          c.*sub.*mem = parse_double(v);
        }};
  };
  auto flag = [](const std::string& key, bool AblationFlags::*mem) {
    return ConfigField{key,
                       [mem](const RunConfig& c) {
                         return c.ablation.*mem ? "on" : "off";
                       },
                       [mem](RunConfig& c, const std::string& v) {
                         c.ablation.*mem = parse_bool(v);
                       }};
  };
  static const std::vector<ConfigField> fields = {
      ConfigField{"seed",
                  [](const RunConfig& c) { return std::to_string(c.seed); },
                  [](RunConfig& c, const std::string& v) {
                    c.seed = parse_uint(v);
                  }},
      i64("epochs", &RunConfig::epochs),
      i64("batch_videos", &RunConfig::batch_videos),
      ConfigField{"task",
                  [](const RunConfig& c) { return to_string(c.task); },
                  [](RunConfig& c, const std::string& v) {
                    c.task = parse_task(v);
                  }},
      ConfigField{"guidance",
                  [](const RunConfig& c) { return to_string(c.guidance); },
                  [](RunConfig& c, const std::string& v) {
                    c.guidance = parse_guidance(v);
                  }},
      flag("ablation.spatial", &AblationFlags::spatial),
      flag("ablation.temporal_decoder", &AblationFlags::temporal_decoder),
      flag("ablation.message_token", &AblationFlags::message_token),
      str("provider", &RunConfig::provider),
      i64("d_text", &RunConfig::d_text),
      str("embedding_table", &RunConfig::embedding_table),
      str("dataset_path", &RunConfig::dataset_path),
      str("clip_path", &RunConfig::clip_path),
      str("val_dataset_path", &RunConfig::val_dataset_path),
      str("val_clip_path", &RunConfig::val_clip_path),
      str("checkpoint_path", &RunConfig::checkpoint_path),
      str("report_dir", &RunConfig::report_dir),
      ConfigField{"gen.seed",
                  [](const RunConfig& c) { return std::to_string(c.gen.seed); },
                  [](RunConfig& c, const std::string& v) {
                    c.gen.seed = parse_uint(v);
                  }},
      sub_i64("gen.num_videos", &RunConfig::gen, &GenConfig::num_videos),
      sub_i64("gen.frames_per_video", &RunConfig::gen,
              &GenConfig::frames_per_video),
      sub_i64("gen.pairs_per_frame", &RunConfig::gen,
              &GenConfig::pairs_per_frame),
      sub_i64("gen.entity_class_count", &RunConfig::gen,
              &GenConfig::entity_class_count),
      sub_i64("gen.attention_predicates", &RunConfig::gen,
              &GenConfig::attention_predicates),
      sub_i64("gen.spatial_predicates", &RunConfig::gen,
              &GenConfig::spatial_predicates),
      sub_i64("gen.contacting_predicates", &RunConfig::gen,
              &GenConfig::contacting_predicates),
      sub_f64("gen.change_rate", &RunConfig::gen, &GenConfig::change_rate),
      sub_f64("gen.sigma_feature", &RunConfig::gen, &GenConfig::sigma_feature),
      sub_f64("gen.box_jitter", &RunConfig::gen, &GenConfig::box_jitter),
      sub_f64("gen.class_confusion", &RunConfig::gen,
              &GenConfig::class_confusion),
      sub_i64("gen.d_v", &RunConfig::gen, &GenConfig::d_v),
      sub_i64("gen.d_clip", &RunConfig::gen, &GenConfig::d_clip),
      sub_i64("fusion.d_model", &RunConfig::fusion, &FusionConfig::d_model),
      sub_i64("fusion.spatial_layers", &RunConfig::fusion,
              &FusionConfig::spatial_layers),
      sub_i64("fusion.temporal_layers", &RunConfig::fusion,
              &FusionConfig::temporal_layers),
      sub_i64("fusion.heads", &RunConfig::fusion, &FusionConfig::heads),
      sub_i64("fusion.ff_dim", &RunConfig::fusion, &FusionConfig::ff_dim),
      sub_f64("fusion.dropout", &RunConfig::fusion, &FusionConfig::dropout),
      sub_i64("fusion.max_temporal_positions", &RunConfig::fusion,
              &FusionConfig::max_temporal_positions),
      sub_i64("fusion.d_sem", &RunConfig::fusion, &FusionConfig::d_sem),
      sub_f64("optim.lr", &RunConfig::optim, &OptimConfig::lr),
      sub_f64("optim.beta1", &RunConfig::optim, &OptimConfig::beta1),
      sub_f64("optim.beta2", &RunConfig::optim, &OptimConfig::beta2),
      sub_f64("optim.eps", &RunConfig::optim, &OptimConfig::eps),
      sub_f64("optim.weight_decay", &RunConfig::optim,
              &OptimConfig::weight_decay),
      sub_f64("optim.focal_gamma", &RunConfig::optim,
              &OptimConfig::focal_gamma),
      sub_f64("optim.focal_alpha", &RunConfig::optim,
              &OptimConfig::focal_alpha),
      sub_f64("optim.lambda_obj", &RunConfig::optim, &OptimConfig::lambda_obj),
      ConfigField{"eval.recall_ks",
                  [](const RunConfig& c) { return fmt_ks(c.eval.recall_ks); },
                  [](RunConfig& c, const std::string& v) {
                    c.eval.recall_ks = parse_ks(v);
                  }},
      ConfigField{"eval.strategy",
                  [](const RunConfig& c) {
                    return to_string(c.eval.strategy);
                  },
                  [](RunConfig& c, const std::string& v) {
                    c.eval.strategy = parse_strategy(v);
                  }},
      sub_i64("eval.top_k", &RunConfig::eval, &EvalConfig::top_k),
      sub_i64("eval.no_constraints_budget", &RunConfig::eval,
              &EvalConfig::no_constraints_budget),
      sub_f64("eval.iou_threshold", &RunConfig::eval,
              &EvalConfig::iou_threshold),
  };
  return fields;
}

// Per-video precomputation shared across epochs: pair plans, guidance
// targets, and the flattened multi-hot relation targets in the same
// (pair, time) row order as the fused output.
struct VideoCache {
  std::vector<PairSequencePlan> plans;
  GuidanceTargets targets;
  std::vector<double> rel_targets;     // [total rows x P]
  std::int64_t rel_rows = 0;
  std::int64_t transitions = 0;
  std::int64_t labeled_frames = 0;
  Tensor entity_features;              // [n_entities x d_v]
  std::vector<std::int64_t> entity_classes;
};

VideoCache build_cache(const RunConfig& cfg, const VideoSample& video,
                       const Vocabulary& vocab, TextProvider& provider) {
  VideoCache cache;
  cache.plans = video_pair_plans(video, cfg.task);
  cache.targets = build_guidance_targets(video, cache.plans, vocab, provider,
                                         PromptTemplate{});
  cache.transitions = count_transitions(cache.plans, cache.targets);
  cache.labeled_frames = count_labeled_frames(cache.targets);
  const std::int64_t p = vocab.predicate_count();
  for (const auto& plan : cache.plans) {
    for (std::int64_t fp : plan.frame_pos) {
      std::vector<double> row(p, 0.0);
      for (const auto& e : video.frames[fp].edges) {
        if (e.subject_id == plan.key.subject_id &&
            e.object_id == plan.key.object_id) {
          for (auto pred : e.labels) row[pred] = 1.0;
          break;
        }
      }
      cache.rel_targets.insert(cache.rel_targets.end(), row.begin(),
                               row.end());
      ++cache.rel_rows;
    }
  }
  std::vector<double> feats;
  for (const auto& frame : video.frames) {
    for (const auto& ent : frame.entities) {
      feats.insert(feats.end(), ent.visual_feature.begin(),
                   ent.visual_feature.end());
      cache.entity_classes.push_back(ent.class_id);
    }
  }
  const std::int64_t n = static_cast<std::int64_t>(cache.entity_classes.size());
  cache.entity_features =
      Tensor::matrix(n, cfg.gen.d_v, std::move(feats));
  return cache;
}

struct BatchNorms {
  std::int64_t rel_rows = 0;
  std::int64_t entities = 0;
  std::int64_t guidance = 0;  // transitions or labeled frames per mode
};

// Forward pass and loss for one video on its own tape. With `norms` from the
// whole batch, summing these per-video scalars reproduces the batch mean.
struct VideoLoss {
  Tape::Ref total;
  double l_obj = 0.0;
  double l_rel = 0.0;
  double l_guidance = 0.0;
};

VideoLoss video_loss(Tape& tape, ParamStore& store, const RunConfig& cfg,
                     const VideoSample& video, const ClipEmbeddings& embeddings,
                     const VideoCache& cache, const BatchNorms& norms,
                     double lambda, const DropoutCtx& dctx) {
  FusionOutput fused = fuse_video(tape, store, cfg.fusion, video, embeddings,
                                  cfg.task, cfg.ablation, dctx);
  std::vector<Tape::Ref> er_parts;
  er_parts.reserve(fused.pairs.size());
  for (const auto& seq : fused.pairs) er_parts.push_back(seq.e_r);
  VideoLoss out;
  Tape::Ref l_rel = tape.zeros(1, 1);
  if (!er_parts.empty()) {
    Tape::Ref e_r = tape.concat_rows(er_parts);
    Tape::Ref logits = relation_logits(tape, store, e_r);
    l_rel = relation_loss(tape, logits, cache.rel_targets,
                          cfg.optim.focal_gamma, cfg.optim.focal_alpha,
                          norms.rel_rows)
                .loss;
  }
  Tape::Ref l_obj = tape.zeros(1, 1);
  if (lambda != 0.0 && !cache.entity_classes.empty()) {
    Tape::Ref logits = entity_logits(
        tape, store, tape.constant_like(cache.entity_features));
    l_obj = entity_loss(tape, logits, cache.entity_classes, norms.entities)
                .loss;
  }
  Tape::Ref l_guid = tape.zeros(1, 1);
  switch (cfg.guidance) {
    case GuidanceMode::kNone:
      break;
    case GuidanceMode::kEq2:
      l_guid = guidance_loss(tape, store, fused.pairs, cache.targets,
                             norms.guidance)
                   .loss;
      break;
    case GuidanceMode::kEq4:
      l_guid = guidance_loss_direct(tape, store, fused.pairs, cache.targets,
                                    norms.guidance)
                   .loss;
      break;
    case GuidanceMode::kBinary:
      l_guid = binary_change_loss(tape, store, fused.pairs, cache.targets,
                                  norms.guidance)
                   .loss;
      break;
  }
  out.total = total_loss(tape, l_obj, l_rel, l_guid, lambda);
  out.l_obj = tape.scalar(l_obj);
  out.l_rel = tape.scalar(l_rel);
  out.l_guidance = tape.scalar(l_guid);
  return out;
}

EvalConfig eval_config(const RunConfig& cfg) {
  EvalConfig e = cfg.eval;
  e.task = cfg.task;
  e.validate();
  return e;
}

}  // namespace

std::string to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::kNone: return "none";
    case GuidanceMode::kEq2: return "eq2";
    case GuidanceMode::kEq4: return "eq4";
    case GuidanceMode::kBinary: return "binary";
  }
  fail("bad guidance mode");
}

void RunConfig::validate() const {
  gen.validate();
  fusion.validate();
  optim.validate();
  eval.validate();
  if (epochs < 0) fail("epochs must be non-negative");
  if (batch_videos < 1) fail("batch_videos must be positive");
  if (d_text < 1) fail("d_text must be positive");
  if (provider != "stub" && provider != "file") {
    fail("provider must be 'stub' or 'file'");
  }
  if (provider == "file" && embedding_table.empty()) {
    fail("file provider requires embedding_table");
  }
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : config_fields()) {
    out += f.key;
    out += " = ";
    out += f.get(cfg);
    out += "\n";
  }
  return out;
}

RunConfig parse_config(const std::string& text) {
  std::map<std::string, const ConfigField*> by_key;
  for (const auto& f : config_fields()) by_key[f.key] = &f;
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      fail("config error at line " + std::to_string(lineno) +
           ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = by_key.find(key);
    if (it == by_key.end()) {
      fail("config error at line " + std::to_string(lineno) +
           ": unknown key '" + key + "'");
    }
    try {
      it->second->set(cfg, value);
    } catch (const std::exception& e) {
      fail("config error at line " + std::to_string(lineno) + ": " +
           e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config(buf.str());
}

std::uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a64(serialize_config(cfg));
}

std::string RunRecord::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["wall_seconds"] = wall_seconds;
  j["epoch_losses"] = nlohmann::json::array();
  for (const auto& b : epoch_losses) {
    j["epoch_losses"].push_back({{"l_obj", b.l_obj},
                                 {"l_rel", b.l_rel},
                                 {"l_guidance", b.l_guidance},
                                 {"lambda", b.lambda},
                                 {"total", b.total}});
  }
  j["val_recall"] = nlohmann::json::array();
  for (const auto& r : val_recall) {
    j["val_recall"].push_back({{"task", to_string(r.task)},
                               {"strategy", to_string(r.strategy)},
                               {"k", r.k},
                               {"recall", r.recall}});
  }
  return j.dump(2) + "\n";
}

RunRecord RunRecord::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  RunRecord rec;
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.config_hash = j.at("config_hash").get<std::uint64_t>();
  rec.wall_seconds = j.at("wall_seconds").get<double>();
  for (const auto& b : j.at("epoch_losses")) {
    LossBreakdown lb;
    lb.l_obj = b.at("l_obj").get<double>();
    lb.l_rel = b.at("l_rel").get<double>();
    lb.l_guidance = b.at("l_guidance").get<double>();
    lb.lambda = b.at("lambda").get<double>();
    lb.total = b.at("total").get<double>();
    rec.epoch_losses.push_back(lb);
  }
  for (const auto& r : j.at("val_recall")) {
    RecallRow row;
    row.task = parse_task(r.at("task").get<std::string>());
    row.strategy = parse_strategy(r.at("strategy").get<std::string>());
    row.k = r.at("k").get<std::int64_t>();
    row.recall = r.at("recall").get<double>();
    rec.val_recall.push_back(row);
  }
  return rec;
}

Dataset load_dataset(const RunConfig& cfg, const std::string& dataset_path,
                     const std::string& clip_path) {
  Dataset data;
  data.vocab = cfg.gen.vocabulary();
  data.videos = read_dataset(dataset_path, data.vocab.entity_count());
  data.embeddings = ClipEmbeddings::read(clip_path);
  if (data.embeddings.dim != cfg.gen.d_clip) {
    fail("clip embedding dim " + std::to_string(data.embeddings.dim) +
         " does not match configured d_clip " +
         std::to_string(cfg.gen.d_clip));
  }
  return data;
}

ParamStore init_model(const RunConfig& cfg, const Vocabulary& vocab) {
  std::mt19937_64 rng(hash_mix(cfg.seed, fnv1a64("init")));
  ParamStore store;
  ModelDims dims;
  dims.d_v = cfg.gen.d_v;
  dims.d_clip = cfg.gen.d_clip;
  dims.entity_classes = vocab.entity_count();
  dims.predicate_classes = vocab.predicate_count();
  init_fusion_params(store, cfg.fusion, dims, rng);
  init_guidance_params(store, 2 * cfg.fusion.d_model, cfg.d_text, rng);
  init_head_params(store, 2 * cfg.fusion.d_model, dims.predicate_classes,
                   dims.d_v, dims.entity_classes, rng);
  return store;
}

std::unique_ptr<TextProvider> make_provider(const RunConfig& cfg) {
  if (cfg.provider == "stub") {
    return std::make_unique<StubTextProvider>(cfg.d_text);
  }
  auto provider = std::make_unique<FileTextProvider>(cfg.embedding_table);
  if (provider->dim() != cfg.d_text) {
    fail("embedding table dim " + std::to_string(provider->dim()) +
         " does not match configured d_text " + std::to_string(cfg.d_text));
  }
  return provider;
}

TrainResult train(const RunConfig& cfg, const Dataset& train_data,
                  const Dataset* val_data) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto provider = make_provider(cfg);
  ParamStore store = init_model(cfg, train_data.vocab);
  const double lambda = cfg.task == Task::kSgDet ? cfg.optim.lambda_obj : 0.0;

  std::vector<VideoCache> caches;
  caches.reserve(train_data.videos.size());
  for (const auto& v : train_data.videos) {
    caches.push_back(build_cache(cfg, v, train_data.vocab, *provider));
  }

  AdamState adam;
  RunRecord record;
  record.seed = cfg.seed;
  record.config_hash = config_hash(cfg);
  const std::int64_t n = static_cast<std::int64_t>(train_data.videos.size());
  if (n == 0) fail("training set is empty");

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_rng(
        hash_mix(hash_mix(cfg.seed, fnv1a64("epoch")),
                 static_cast<std::uint64_t>(epoch)));
    std::mt19937_64 dropout_rng(
        hash_mix(hash_mix(cfg.seed, fnv1a64("dropout")),
                 static_cast<std::uint64_t>(epoch)));
    const auto order = shuffle_indices(n, shuffle_rng);
    double sum_obj = 0.0, sum_rel = 0.0, sum_guid = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t begin = 0; begin < n; begin += cfg.batch_videos) {
      const std::int64_t end = std::min(n, begin + cfg.batch_videos);
      BatchNorms norms;
      for (std::int64_t i = begin; i < end; ++i) {
        const VideoCache& c = caches[order[i]];
        norms.rel_rows += c.rel_rows;
        norms.entities += static_cast<std::int64_t>(c.entity_classes.size());
        norms.guidance += cfg.guidance == GuidanceMode::kEq4
                              ? c.labeled_frames
                              : c.transitions;
      }
      double b_obj = 0.0, b_rel = 0.0, b_guid = 0.0;
      store.zero_grads();
      for (std::int64_t i = begin; i < end; ++i) {
        const std::int64_t vi = order[i];
        Tape tape;
        DropoutCtx dctx{true, &dropout_rng};
        VideoLoss vl =
            video_loss(tape, store, cfg, train_data.videos[vi],
                       train_data.embeddings, caches[vi], norms, lambda, dctx);
        tape.backward(vl.total);
        tape.accumulate_param_grads(store);
        b_obj += vl.l_obj;
        b_rel += vl.l_rel;
        b_guid += vl.l_guidance;
      }
      adamw_step(store, adam, cfg.optim);
      sum_obj += b_obj;
      sum_rel += b_rel;
      sum_guid += b_guid;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    record.epoch_losses.push_back(
        make_breakdown(sum_obj * inv, sum_rel * inv, sum_guid * inv, lambda));
  }

  if (val_data) {
    record.val_recall = evaluate(cfg, store, *val_data);
  }
  if (!cfg.checkpoint_path.empty()) {
    save_checkpoint(store, cfg.checkpoint_path);
  }
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return TrainResult{std::move(store), std::move(record)};
}

std::vector<VideoPredictions> predict(const RunConfig& cfg, ParamStore& store,
                                      const Dataset& data) {
  const std::int64_t n = static_cast<std::int64_t>(data.videos.size());
  std::vector<VideoPredictions> out(n);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t vi = 0; vi < n; ++vi) {
    const VideoSample& video = data.videos[vi];
    VideoPredictions vp;
    vp.video_id = video.video_id;
    vp.frames.resize(video.frames.size());

    Tape tape;
    DropoutCtx dctx{false, nullptr};
    FusionOutput fused = fuse_video(tape, store, cfg.fusion, video,
                                    data.embeddings, cfg.task, cfg.ablation,
                                    dctx);

    // Entity class predictions per (frame, instance) for SgCls / SgDet.
    std::map<std::pair<std::int64_t, std::int64_t>,
             std::pair<std::int64_t, double>>
        entity_pred;
    if (cfg.task != Task::kPredCls) {
      std::vector<double> feats;
      std::vector<std::pair<std::int64_t, std::int64_t>> keys;
      for (std::int64_t fp = 0; fp < video.length(); ++fp) {
        for (const auto& ent : video.frames[fp].entities) {
          feats.insert(feats.end(), ent.visual_feature.begin(),
                       ent.visual_feature.end());
          keys.emplace_back(fp, ent.instance_id);
        }
      }
      if (!keys.empty()) {
        Tensor m = Tensor::matrix(
            static_cast<std::int64_t>(keys.size()), cfg.gen.d_v,
            std::move(feats));
        Tape::Ref probs = tape.softmax_rows(
            entity_logits(tape, store, tape.constant_like(m)));
        const auto& val = tape.value(probs);
        const std::int64_t c = tape.cols(probs);
        for (size_t r = 0; r < keys.size(); ++r) {
          std::int64_t best = 0;
          for (std::int64_t j = 1; j < c; ++j) {
            if (val[r * c + j] > val[r * c + best]) best = j;
          }
          entity_pred[keys[r]] = {best, val[r * c + best]};
        }
      }
    }

    for (const auto& seq : fused.pairs) {
      Tape::Ref probs = tape.sigmoid(relation_logits(tape, store, seq.e_r));
      const auto& val = tape.value(probs);
      const std::int64_t p = tape.cols(probs);
      for (size_t j = 0; j < seq.frame_pos.size(); ++j) {
        const std::int64_t fp = seq.frame_pos[j];
        const FrameGraph& frame = video.frames[fp];
        const EntityInstance* s = frame.find_entity(seq.key.subject_id);
        const EntityInstance* o = frame.find_entity(seq.key.object_id);
        PairPrediction pred;
        pred.pair = seq.key;
        pred.subject_box = s->box;
        pred.object_box = o->box;
        if (cfg.task == Task::kPredCls) {
          pred.subject_class = s->class_id;
          pred.object_class = o->class_id;
        } else {
          const auto& sp = entity_pred.at({fp, seq.key.subject_id});
          const auto& op = entity_pred.at({fp, seq.key.object_id});
          pred.subject_class = sp.first;
          pred.subject_score = sp.second;
          pred.object_class = op.first;
          pred.object_score = op.second;
        }
        pred.predicate_scores.assign(val.begin() + static_cast<std::ptrdiff_t>(j) * p,
                                     val.begin() + static_cast<std::ptrdiff_t>(j + 1) * p);
        vp.frames[fp].pairs.push_back(std::move(pred));
      }
    }
    out[vi] = std::move(vp);
  }
  return out;
}

std::vector<RecallRow> evaluate(const RunConfig& cfg, ParamStore& store,
                                const Dataset& data) {
  const auto preds = predict(cfg, store, data);
  std::vector<RecallRow> rows;
  for (Strategy s : {Strategy::kWithConstraints, Strategy::kNoConstraints,
                     Strategy::kTopK}) {
    EvalConfig e = eval_config(cfg);
    e.strategy = s;
    const auto part = corpus_recall(data.videos, preds, e);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  return rows;
}

std::vector<GradCheckResult> gradcheck(const RunConfig& base) {
  RunConfig cfg = base;
  cfg.gen.num_videos = 2;
  cfg.gen.frames_per_video = 3;
  cfg.gen.pairs_per_frame = 2;
  cfg.gen.entity_class_count = 5;
  cfg.gen.attention_predicates = 2;
  cfg.gen.spatial_predicates = 1;
  cfg.gen.contacting_predicates = 1;
  cfg.gen.d_v = 4;
  cfg.gen.d_clip = 4;
  cfg.fusion.d_model = 6;
  cfg.fusion.spatial_layers = 1;
  cfg.fusion.temporal_layers = 1;
  cfg.fusion.heads = 2;
  cfg.fusion.ff_dim = 8;
  cfg.fusion.dropout = 0.0;
  cfg.fusion.max_temporal_positions = 4;
  cfg.fusion.d_sem = 4;
  cfg.d_text = 6;
  cfg.provider = "stub";
  cfg.embedding_table.clear();
  cfg.validate();

  struct Variant {
    std::string name;
    GuidanceMode mode;
    Task task;
  };
  const std::vector<Variant> variants = {
      {"none", GuidanceMode::kNone, Task::kPredCls},
      {"eq2", GuidanceMode::kEq2, Task::kPredCls},
      {"eq4", GuidanceMode::kEq4, Task::kPredCls},
      {"binary", GuidanceMode::kBinary, Task::kPredCls},
      {"eq2_sgdet", GuidanceMode::kEq2, Task::kSgDet},
  };

  SynthDataset synth = generate(cfg.gen);
  const Vocabulary vocab = cfg.gen.vocabulary();
  auto provider = make_provider(cfg);

  std::vector<GradCheckResult> results;
  for (const auto& variant : variants) {
    RunConfig vc = cfg;
    vc.guidance = variant.mode;
    vc.task = variant.task;
    const double lambda =
        vc.task == Task::kSgDet ? vc.optim.lambda_obj : 0.0;

    std::vector<VideoCache> caches;
    for (const auto& v : synth.videos) {
      caches.push_back(build_cache(vc, v, vocab, *provider));
    }
    BatchNorms norms;
    for (const auto& c : caches) {
      norms.rel_rows += c.rel_rows;
      norms.entities += static_cast<std::int64_t>(c.entity_classes.size());
      norms.guidance += vc.guidance == GuidanceMode::kEq4 ? c.labeled_frames
                                                          : c.transitions;
    }

    ParamStore store = init_model(vc, vocab);
    auto loss_fn = [&](ParamStore& s, bool with_grad) -> double {
      double total = 0.0;
      for (size_t i = 0; i < synth.videos.size(); ++i) {
        Tape tape;
        DropoutCtx dctx{false, nullptr};
        VideoLoss vl = video_loss(tape, s, vc, synth.videos[i],
                                  synth.embeddings, caches[i], norms, lambda,
                                  dctx);
        total += tape.scalar(vl.total);
        if (with_grad) {
          tape.backward(vl.total);
          tape.accumulate_param_grads(s);
        }
      }
      return total;
    };
    GradCheckResult res;
    res.variant = variant.name;
    res.report = finite_diff_check(loss_fn, store, 1e-5, 1e-4);
    results.push_back(std::move(res));
  }
  return results;
}

RunConfig apply_variant(RunConfig cfg, const std::string& name) {
  auto flags = [&](bool spatial, bool decoder, bool token) {
    cfg.ablation.spatial = spatial;
    cfg.ablation.temporal_decoder = decoder;
    cfg.ablation.message_token = token;
  };
  if (name == "tr2") {
    cfg.guidance = GuidanceMode::kEq2;
    flags(true, true, true);
  } else if (name == "tr2bin") {
    cfg.guidance = GuidanceMode::kBinary;
    flags(true, true, true);
  } else if (name == "tr2minus") {
    cfg.guidance = GuidanceMode::kNone;
    flags(true, true, true);
  } else if (name == "eq4") {
    cfg.guidance = GuidanceMode::kEq4;
    flags(true, true, true);
  } else if (name == "base") {
    flags(false, false, false);
  } else if (name == "decoder_only") {
    flags(false, true, false);
  } else if (name == "spatial_only") {
    flags(true, false, false);
  } else if (name == "spatial_decoder") {
    flags(true, true, false);
  } else if (name == "spatial_token") {
    flags(true, false, true);
  } else if (name == "full") {
    flags(true, true, true);
  } else {
    fail("unknown variant '" + name + "'");
  }
  return cfg;
}

std::vector<AblationRow> ablate(const RunConfig& base,
                                const std::vector<std::string>& variants,
                                std::int64_t num_seeds,
                                const Dataset& train_data,
                                const Dataset& val_data) {
  if (num_seeds < 1) fail("num_seeds must be positive");
  std::vector<AblationRow> rows;
  for (const auto& name : variants) {
    AblationRow row;
    row.variant = name;
    row.ks = base.eval.recall_ks;
    row.mean_recall.assign(row.ks.size(), 0.0);
    for (std::int64_t s = 0; s < num_seeds; ++s) {
      RunConfig cfg = apply_variant(base, name);
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      cfg.checkpoint_path.clear();
      TrainResult result = train(cfg, train_data, nullptr);
      const auto preds = predict(cfg, result.store, val_data);
      const auto recall =
          corpus_recall(val_data.videos, preds, eval_config(cfg));
      for (size_t k = 0; k < row.ks.size(); ++k) {
        row.mean_recall[k] += recall[k].recall;
      }
    }
    for (auto& r : row.mean_recall) r /= static_cast<double>(num_seeds);
    row.delta.assign(row.ks.size(), 0.0);
    if (!rows.empty()) {
      for (size_t k = 0; k < row.ks.size(); ++k) {
        row.delta[k] = row.mean_recall[k] - rows.front().mean_recall[k];
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,K,recall,delta\n";
  for (const auto& row : rows) {
    for (size_t k = 0; k < row.ks.size(); ++k) {
      out += row.variant + "," + std::to_string(row.ks[k]) + "," +
             fmt_float(row.mean_recall[k]) + "," + fmt_float(row.delta[k]) +
             "\n";
    }
  }
  return out;
}

}  // namespace tr2
