#include "tr2/guidance.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tr2/hash.hpp"

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

std::int64_t count_slot(const std::string& pattern, const std::string& slot) {
  std::int64_t n = 0;
  size_t pos = 0;
  while ((pos = pattern.find(slot, pos)) != std::string::npos) {
    ++n;
    pos += slot.size();
  }
  return n;
}

std::string replace_slot(std::string s, const std::string& slot,
                         const std::string& value) {
  const size_t pos = s.find(slot);
  if (pos != std::string::npos) s.replace(pos, slot.size(), value);
  return s;
}

std::string normalize_sentence(const std::string& in) {
  std::string out;
  bool pending_space = false;
  for (char c : in) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(
        static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// Transitions contribute when the pair is labeled at both ends of an
// adjacent-frame step (frame indices differ by exactly 1).
bool contributes(const std::vector<std::int64_t>& frame_index,
                 const GuidanceTargets& targets, std::int64_t pair_idx,
                 std::int64_t pos) {
  if (pos <= 0) return false;
  if (frame_index[pos] != frame_index[pos - 1] + 1) return false;
  return targets.labeled[pair_idx][pos] && targets.labeled[pair_idx][pos - 1];
}

}  // namespace

void PromptTemplate::validate() const {
  for (const char* slot : {"{subject}", "{predicate}", "{object}"}) {
    if (count_slot(pattern, slot) != 1) {
      fail(std::string("prompt template must contain ") + slot +
           " exactly once");
    }
  }
}

std::string build_prompt(const PromptTemplate& tmpl, const std::string& subject,
                         const std::string& predicate,
                         const std::string& object) {
  tmpl.validate();
  if (subject.empty() || predicate.empty() || object.empty()) {
    fail("prompt slot values must be non-empty");
  }
  std::string s = replace_slot(tmpl.pattern, "{subject}", subject);
  s = replace_slot(s, "{predicate}", predicate);
  s = replace_slot(s, "{object}", object);
  return normalize_sentence(s);
}

std::vector<double> StubTextProvider::embed(const std::string& sentence) {
  std::mt19937_64 rng(fnv1a64(sentence));
  std::vector<double> v(dim_);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = gauss(rng);
    norm2 += x * x;
  }
  const double s = 1.0 / (std::sqrt(norm2) + 1e-300);
  for (auto& x : v) x *= s;
  return v;
}

FileTextProvider::FileTextProvider(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::int64_t lineno = 0;
  auto bad = [&](const std::string& why) -> void {
    throw std::runtime_error("embedding table error at line " +
                             std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(is, line)) bad("empty file");
  ++lineno;
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> dim_) || tag != "dim" || dim_ <= 0) {
      bad("expected 'dim <d>' header");
    }
  }
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) bad("missing TAB separator");
    const std::string sentence = line.substr(0, tab);
    std::istringstream vs(line.substr(tab + 1));
    std::vector<double> vec;
    double x;
    while (vs >> x) vec.push_back(x);
    if (static_cast<std::int64_t>(vec.size()) != dim_) {
      bad("expected " + std::to_string(dim_) + " floats");
    }
    table_[sentence] = std::move(vec);
  }
}

std::vector<double> FileTextProvider::embed(const std::string& sentence) {
  auto it = table_.find(sentence);
  if (it == table_.end()) {
    throw std::runtime_error("no embedding for sentence: \"" + sentence +
                             "\"");
  }
  return it->second;
}

void FileTextProvider::insert(const std::string& sentence,
                              std::vector<double> vec) {
  if (dim_ == 0) dim_ = static_cast<std::int64_t>(vec.size());
  if (static_cast<std::int64_t>(vec.size()) != dim_) {
    fail("embedding dimension mismatch on insert");
  }
  table_[sentence] = std::move(vec);
}

void FileTextProvider::write(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "dim " << dim_ << "\n";
  for (const auto& [sentence, vec] : table_) {
    os << sentence << "\t";
    for (size_t i = 0; i < vec.size(); ++i) {
      if (i) os << " ";
      os << fmt_float(vec[i]);
    }
    os << "\n";
  }
}

std::vector<double> pair_sentence_embedding(const FrameGraph& frame,
                                            const PairKey& pair,
                                            const Vocabulary& vocab,
                                            TextProvider& provider,
                                            const PromptTemplate& tmpl) {
  const RelationEdge* edge = nullptr;
  for (const auto& e : frame.edges) {
    if (e.subject_id == pair.subject_id && e.object_id == pair.object_id) {
      edge = &e;
      break;
    }
  }
  if (!edge || edge->labels.empty()) {
    fail("pair_sentence_embedding: pair has no ground-truth predicates");
  }
  const EntityInstance* s = frame.find_entity(pair.subject_id);
  const EntityInstance* o = frame.find_entity(pair.object_id);
  if (!s || !o) fail("pair_sentence_embedding: missing entity");
  std::vector<double> mean(provider.dim(), 0.0);
  for (auto pred : edge->labels) {
    const auto sentence = build_prompt(
        tmpl, vocab.entity_classes[s->class_id],
        vocab.predicate_classes[pred].surface_form,
        vocab.entity_classes[o->class_id]);
    const auto v = provider.embed(sentence);
    for (size_t i = 0; i < mean.size(); ++i) mean[i] += v[i];
  }
  const double inv = 1.0 / static_cast<double>(edge->labels.size());
  for (auto& x : mean) x *= inv;
  return mean;
}

void init_guidance_params(ParamStore& store, std::int64_t d_er,
                          std::int64_t d_text, std::mt19937_64& rng) {
  store.create("guidance.proj.w",
               Tensor::randn(d_er, d_text,
                             std::sqrt(2.0 / static_cast<double>(d_er + d_text)),
                             rng));
  store.create("guidance.proj.b", Tensor::zeros(1, d_text)).requires_grad =
      true;
  store.create("guidance.bin.w",
               Tensor::randn(d_er, 1,
                             std::sqrt(2.0 / static_cast<double>(d_er + 1)),
                             rng));
  store.create("guidance.bin.b", Tensor::zeros(1, 1)).requires_grad = true;
}

GuidanceTargets build_guidance_targets(
    const VideoSample& video, const std::vector<PairSequencePlan>& plans,
    const Vocabulary& vocab, TextProvider& provider,
    const PromptTemplate& tmpl) {
  GuidanceTargets out;
  out.d_text = provider.dim();
  out.e_s.resize(plans.size());
  out.labeled.resize(plans.size());
  out.changed.resize(plans.size());
  for (size_t pi = 0; pi < plans.size(); ++pi) {
    const auto& seq = plans[pi];
    const std::int64_t t = static_cast<std::int64_t>(seq.frame_pos.size());
    out.e_s[pi].resize(t);
    out.labeled[pi].assign(t, false);
    out.changed[pi].assign(t, false);
    std::set<std::int64_t> prev_labels;
    bool prev_labeled = false;
    for (std::int64_t j = 0; j < t; ++j) {
      const FrameGraph& frame = video.frames[seq.frame_pos[j]];
      const RelationEdge* edge = nullptr;
      for (const auto& e : frame.edges) {
        if (e.subject_id == seq.key.subject_id &&
            e.object_id == seq.key.object_id) {
          edge = &e;
          break;
        }
      }
      if (edge && !edge->labels.empty()) {
        out.labeled[pi][j] = true;
        out.e_s[pi][j] =
            pair_sentence_embedding(frame, seq.key, vocab, provider, tmpl);
        if (j > 0 && prev_labeled) {
          out.changed[pi][j] = edge->labels != prev_labels;
        }
        prev_labels = edge->labels;
        prev_labeled = true;
      } else {
        prev_labeled = false;
      }
    }
  }
  return out;
}

std::int64_t count_transitions(const std::vector<PairSequencePlan>& plans,
                               const GuidanceTargets& targets) {
  std::int64_t n = 0;
  for (size_t pi = 0; pi < plans.size(); ++pi) {
    const std::int64_t t =
        static_cast<std::int64_t>(plans[pi].frame_pos.size());
    for (std::int64_t j = 1; j < t; ++j) {
      if (contributes(plans[pi].frame_index, targets,
                      static_cast<std::int64_t>(pi), j)) {
        ++n;
      }
    }
  }
  return n;
}

std::int64_t count_labeled_frames(const GuidanceTargets& targets) {
  std::int64_t n = 0;
  for (const auto& per_pair : targets.labeled) {
    for (bool l : per_pair) n += l ? 1 : 0;
  }
  return n;
}

GuidanceLoss guidance_loss(Tape& tape, ParamStore& store,
                           const std::vector<PairSequence>& pairs,
                           const GuidanceTargets& targets,
                           std::int64_t norm) {
  Tape::Ref w = tape.param(store, "guidance.proj.w");
  Tape::Ref b = tape.param(store, "guidance.proj.b");
  std::vector<Tape::Ref> rows;
  std::int64_t count = 0;
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto& seq = pairs[pi];
    const std::int64_t t = static_cast<std::int64_t>(seq.frame_pos.size());
    Tape::Ref proj;
    for (std::int64_t j = 1; j < t; ++j) {
      if (!contributes(seq.frame_index, targets, static_cast<std::int64_t>(pi), j)) {
        continue;
      }
      if (!proj.valid()) proj = tape.linear(seq.e_r, w, b);
      Tape::Ref dr = tape.sub(tape.slice_rows(proj, j, 1),
                              tape.slice_rows(proj, j - 1, 1));
      std::vector<double> ds(targets.d_text);
      for (std::int64_t i = 0; i < targets.d_text; ++i) {
        ds[i] = targets.e_s[pi][j][i] - targets.e_s[pi][j - 1][i];
      }
      rows.push_back(
          tape.sub(dr, tape.constant(1, targets.d_text, std::move(ds))));
      ++count;
    }
  }
  if (rows.empty()) {
    return {tape.zeros(1, 1), 0, true};
  }
  Tape::Ref diffs = tape.concat_rows(rows);
  const double denom =
      static_cast<double>(norm > 0 ? norm : count) *
      static_cast<double>(targets.d_text);
  Tape::Ref loss =
      tape.scale(tape.sum_all(tape.mul(diffs, diffs)), 1.0 / denom);
  return {loss, count, false};
}

GuidanceLoss guidance_loss_direct(Tape& tape, ParamStore& store,
                                  const std::vector<PairSequence>& pairs,
                                  const GuidanceTargets& targets,
                                  std::int64_t norm) {
  Tape::Ref w = tape.param(store, "guidance.proj.w");
  Tape::Ref b = tape.param(store, "guidance.proj.b");
  std::vector<Tape::Ref> rows;
  std::int64_t count = 0;
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto& seq = pairs[pi];
    const std::int64_t t = static_cast<std::int64_t>(seq.frame_pos.size());
    Tape::Ref proj;
    for (std::int64_t j = 0; j < t; ++j) {
      if (!targets.labeled[pi][j]) continue;
      if (!proj.valid()) proj = tape.linear(seq.e_r, w, b);
      rows.push_back(tape.sub(
          tape.slice_rows(proj, j, 1),
          tape.constant(1, targets.d_text, targets.e_s[pi][j])));
      ++count;
    }
  }
  if (rows.empty()) {
    return {tape.zeros(1, 1), 0, true};
  }
  Tape::Ref diffs = tape.concat_rows(rows);
  const double denom =
      static_cast<double>(norm > 0 ? norm : count) *
      static_cast<double>(targets.d_text);
  Tape::Ref loss =
      tape.scale(tape.sum_all(tape.mul(diffs, diffs)), 1.0 / denom);
  return {loss, count, false};
}

GuidanceLoss binary_change_loss(Tape& tape, ParamStore& store,
                                const std::vector<PairSequence>& pairs,
                                const GuidanceTargets& targets,
                                std::int64_t norm) {
  Tape::Ref w = tape.param(store, "guidance.bin.w");
  Tape::Ref b = tape.param(store, "guidance.bin.b");
  std::vector<Tape::Ref> rows;
  std::vector<double> flags;
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto& seq = pairs[pi];
    const std::int64_t t = static_cast<std::int64_t>(seq.frame_pos.size());
    for (std::int64_t j = 1; j < t; ++j) {
      if (!contributes(seq.frame_index, targets, static_cast<std::int64_t>(pi), j)) {
        continue;
      }
      rows.push_back(tape.sub(tape.slice_rows(seq.e_r, j, 1),
                              tape.slice_rows(seq.e_r, j - 1, 1)));
      flags.push_back(targets.changed[pi][j] ? 1.0 : 0.0);
    }
  }
  if (rows.empty()) {
    return {tape.zeros(1, 1), 0, true};
  }
  const std::int64_t count = static_cast<std::int64_t>(rows.size());
  Tape::Ref z = tape.concat_rows(rows);
  Tape::Ref p = tape.sigmoid(tape.linear(z, w, b));  // [n,1]
  std::vector<double> pos = flags;
  std::vector<double> neg(flags.size());
  for (size_t i = 0; i < flags.size(); ++i) neg[i] = 1.0 - flags[i];
  Tape::Ref loss_terms = tape.neg(
      tape.add(tape.cmul(tape.log_clamped(p), pos),
               tape.cmul(tape.log_clamped(
                             tape.add_const(tape.neg(p), 1.0)),
                         neg)));
  const double denom = static_cast<double>(norm > 0 ? norm : count);
  Tape::Ref loss = tape.scale(tape.sum_all(loss_terms), 1.0 / denom);
  return {loss, count, false};
}

}  // namespace tr2
