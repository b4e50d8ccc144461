#include "tr2/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

}  // namespace

void OptimConfig::validate() const {
  if (lr < 0.0) fail("learning rate must be non-negative");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
    fail("adam betas must lie in (0,1)");
  }
  if (eps <= 0.0) fail("adam epsilon must be positive");
  if (weight_decay < 0.0) fail("weight decay must be non-negative");
  if (focal_gamma < 0.0) fail("focal gamma must be non-negative");
  if (focal_alpha < 0.0 || focal_alpha > 1.0) {
    fail("focal alpha must lie in [0,1]");
  }
}

void init_head_params(ParamStore& store, std::int64_t d_er,
                      std::int64_t n_predicates, std::int64_t d_v,
                      std::int64_t n_entity_classes, std::mt19937_64& rng) {
  const double rel_std =
      std::sqrt(2.0 / static_cast<double>(d_er + n_predicates));
  store.create("heads.rel.w", Tensor::randn(d_er, n_predicates, rel_std, rng));
  store.create("heads.rel.b", Tensor::zeros(1, n_predicates)).requires_grad =
      true;
  const double obj_std =
      std::sqrt(2.0 / static_cast<double>(d_v + n_entity_classes));
  store.create("heads.obj.w",
               Tensor::randn(d_v, n_entity_classes, obj_std, rng));
  store.create("heads.obj.b", Tensor::zeros(1, n_entity_classes))
      .requires_grad = true;
}

Tape::Ref relation_logits(Tape& tape, ParamStore& store, Tape::Ref e_r) {
  return tape.linear(e_r, tape.param(store, "heads.rel.w"),
                     tape.param(store, "heads.rel.b"));
}

Tape::Ref entity_logits(Tape& tape, ParamStore& store, Tape::Ref visual) {
  return tape.linear(visual, tape.param(store, "heads.obj.w"),
                     tape.param(store, "heads.obj.b"));
}

ScalarLoss entity_loss(Tape& tape, Tape::Ref logits,
                       const std::vector<std::int64_t>& classes,
                       std::int64_t norm) {
  if (classes.empty()) {
    return {tape.zeros(1, 1), 0, true};
  }
  Tape::Ref loss = tape.cross_entropy_mean(logits, classes, norm);
  return {loss, static_cast<std::int64_t>(classes.size()), false};
}

ScalarLoss relation_loss(Tape& tape, Tape::Ref logits,
                         const std::vector<double>& targets, double gamma,
                         double alpha, std::int64_t norm) {
  const std::int64_t n = tape.rows(logits);
  const std::int64_t p = tape.cols(logits);
  if (static_cast<std::int64_t>(targets.size()) != n * p) {
    fail("relation_loss: target size " + std::to_string(targets.size()) +
         " does not match logits " + std::to_string(n) + "x" +
         std::to_string(p));
  }
  for (double t : targets) {
    if (t != 0.0 && t != 1.0) fail("relation_loss: targets must be 0/1");
  }
  std::vector<double> inv_targets(targets.size());
  std::vector<double> alpha_t(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    inv_targets[i] = 1.0 - targets[i];
    alpha_t[i] = targets[i] == 1.0 ? alpha : 1.0 - alpha;
  }
  Tape::Ref prob = tape.sigmoid(logits);
  // p_t = p where target 1, 1-p where target 0
  Tape::Ref p_t = tape.add(tape.cmul(prob, targets),
                           tape.cmul(tape.add_const(tape.neg(prob), 1.0),
                                     inv_targets));
  Tape::Ref modulator =
      tape.pow_const(tape.add_const(tape.neg(p_t), 1.0), gamma);
  Tape::Ref terms =
      tape.neg(tape.cmul(tape.mul(modulator, tape.log_clamped(p_t)), alpha_t));
  const double rows = static_cast<double>(norm > 0 ? norm : n);
  Tape::Ref loss = tape.scale(tape.sum_all(terms),
                              1.0 / (rows * static_cast<double>(p)));
  return {loss, n * p, false};
}

Tape::Ref total_loss(Tape& tape, Tape::Ref l_obj, Tape::Ref l_rel,
                     Tape::Ref l_guidance, double lambda) {
  auto check = [&](Tape::Ref r, const char* name) {
    if (!std::isfinite(tape.scalar(r))) {
      throw std::runtime_error(std::string("non-finite loss component: ") +
                               name);
    }
  };
  check(l_obj, "L_obj");
  check(l_rel, "L_rel");
  check(l_guidance, "L_guidance");
  return tape.add(tape.add(tape.scale(l_obj, lambda), l_rel), l_guidance);
}

LossBreakdown make_breakdown(double l_obj, double l_rel, double l_guidance,
                             double lambda) {
  LossBreakdown b;
  b.l_obj = l_obj;
  b.l_rel = l_rel;
  b.l_guidance = l_guidance;
  b.lambda = lambda;
  b.total = lambda * l_obj + l_rel + l_guidance;
  return b;
}

void adamw_step(ParamStore& store, AdamState& state, const OptimConfig& cfg) {
  cfg.validate();
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, tensor] : store.values) {
    auto& g = store.grad(name);
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        throw std::runtime_error("non-finite gradient for parameter " + name);
      }
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    m.resize(g.size(), 0.0);
    v.resize(g.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      tensor.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      tensor.data[i] -= cfg.lr * cfg.weight_decay * tensor.data[i];
    }
  }
}

}  // namespace tr2
