#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tr2/fusion.hpp"
#include "tr2/scenegraph.hpp"
#include "tr2/tensor.hpp"

namespace tr2 {

struct PromptTemplate {
  std::string pattern = "a photo of a {subject} {predicate} a {object}";

  void validate() const;  // each slot exactly once
};

std::string build_prompt(const PromptTemplate& tmpl, const std::string& subject,
                         const std::string& predicate,
                         const std::string& object);

// Text-embedding source. The real pretrained encoder runs offline; its
// outputs are plugged in through the file provider.
class TextProvider {
 public:
  virtual ~TextProvider() = default;
  virtual std::vector<double> embed(const std::string& sentence) = 0;
  virtual std::int64_t dim() const = 0;
};

// Deterministic pseudo-embedding: seeded hash of the sentence drives a
// gaussian draw, normalized to unit length.
class StubTextProvider : public TextProvider {
 public:
  explicit StubTextProvider(std::int64_t dim = 512) : dim_(dim) {}
  std::vector<double> embed(const std::string& sentence) override;
  std::int64_t dim() const override { return dim_; }

 private:
  std::int64_t dim_;
};

// Exact-string lookup in a precomputed sentence -> vector table.
// File format: "dim <d>" header, then "<sentence>\t<floats...>" per line.
class FileTextProvider : public TextProvider {
 public:
  explicit FileTextProvider(const std::string& path);
  std::vector<double> embed(const std::string& sentence) override;
  std::int64_t dim() const override { return dim_; }
  void insert(const std::string& sentence, std::vector<double> vec);
  void write(const std::string& path) const;
  FileTextProvider() = default;
  void set_dim(std::int64_t d) { dim_ = d; }

 private:
  std::int64_t dim_ = 0;
  std::map<std::string, std::vector<double>> table_;
};

// Mean text embedding over one prompted sentence per ground-truth predicate
// of the pair in the frame. Throws if the pair carries no labels there.
std::vector<double> pair_sentence_embedding(const FrameGraph& frame,
                                            const PairKey& pair,
                                            const Vocabulary& vocab,
                                            TextProvider& provider,
                                            const PromptTemplate& tmpl);

// Guidance parameters: projection from e_r space to text space plus the
// binary-change head.
void init_guidance_params(ParamStore& store, std::int64_t d_er,
                          std::int64_t d_text, std::mt19937_64& rng);

// Per fused pair sequence: e_s per position (empty when the pair is
// unlabeled in that frame) and whether the label set changed vs the
// previous adjacent frame.
struct GuidanceTargets {
  std::int64_t d_text = 0;
  std::vector<std::vector<std::vector<double>>> e_s;  // [pair][pos][d_text]
  std::vector<std::vector<bool>> labeled;             // [pair][pos]
  std::vector<std::vector<bool>> changed;             // [pair][pos], pos>=1
};

GuidanceTargets build_guidance_targets(
    const VideoSample& video, const std::vector<PairSequencePlan>& plans,
    const Vocabulary& vocab, TextProvider& provider,
    const PromptTemplate& tmpl);

struct GuidanceLoss {
  Tape::Ref loss;               // scalar
  std::int64_t contributions = 0;
  bool empty = false;           // zero contributing terms, loss forced to 0
};

// Eq-style temporal-difference distillation: mean squared error between the
// projected e_r differences and the (frozen) e_s differences, over adjacent
// labeled transitions. `norm` overrides the contribution count for
// batch-level averaging.
GuidanceLoss guidance_loss(Tape& tape, ParamStore& store,
                           const std::vector<PairSequence>& pairs,
                           const GuidanceTargets& targets,
                           std::int64_t norm = -1);

// Direct per-frame distillation ablation (no differencing).
GuidanceLoss guidance_loss_direct(Tape& tape, ParamStore& store,
                                  const std::vector<PairSequence>& pairs,
                                  const GuidanceTargets& targets,
                                  std::int64_t norm = -1);

// Binary-change ablation: BCE of an affine+sigmoid head on e_r differences
// against the label-set-changed flag.
GuidanceLoss binary_change_loss(Tape& tape, ParamStore& store,
                                const std::vector<PairSequence>& pairs,
                                const GuidanceTargets& targets,
                                std::int64_t norm = -1);

// Contribution counters used for batch-level normalization.
std::int64_t count_transitions(const std::vector<PairSequencePlan>& plans,
                               const GuidanceTargets& targets);
std::int64_t count_labeled_frames(const GuidanceTargets& targets);

}  // namespace tr2
