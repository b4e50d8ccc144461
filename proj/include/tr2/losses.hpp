#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tr2/tensor.hpp"

namespace tr2 {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double lambda_obj = 1.0;  // 0 when ground-truth classes are given

  void validate() const;
};

struct LossBreakdown {
  double l_obj = 0.0;
  double l_rel = 0.0;
  double l_guidance = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

// Classifier heads living on top of the fusion output.
void init_head_params(ParamStore& store, std::int64_t d_er,
                      std::int64_t n_predicates, std::int64_t d_v,
                      std::int64_t n_entity_classes, std::mt19937_64& rng);

Tape::Ref relation_logits(Tape& tape, ParamStore& store, Tape::Ref e_r);
Tape::Ref entity_logits(Tape& tape, ParamStore& store, Tape::Ref visual);

struct ScalarLoss {
  Tape::Ref loss;
  std::int64_t count = 0;
  bool empty = false;
};

// Mean softmax cross-entropy over matched detections.
ScalarLoss entity_loss(Tape& tape, Tape::Ref logits,
                       const std::vector<std::int64_t>& classes,
                       std::int64_t norm = -1);

// Focal-form multi-label BCE, mean over (row, predicate) terms. Targets are
// given as a flattened 0/1 matrix matching the logits. `norm` overrides the
// row count used for batch-level averaging.
ScalarLoss relation_loss(Tape& tape, Tape::Ref logits,
                         const std::vector<double>& targets, double gamma,
                         double alpha, std::int64_t norm = -1);

// lambda*L_obj + L_rel + L_guidance; rejects non-finite components by name.
Tape::Ref total_loss(Tape& tape, Tape::Ref l_obj, Tape::Ref l_rel,
                     Tape::Ref l_guidance, double lambda);
LossBreakdown make_breakdown(double l_obj, double l_rel, double l_guidance,
                             double lambda);

// Decoupled weight-decay optimizer state and update.
struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::int64_t step = 0;
};

void adamw_step(ParamStore& store, AdamState& state, const OptimConfig& cfg);

}  // namespace tr2
