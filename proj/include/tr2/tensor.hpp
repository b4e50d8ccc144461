#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace tr2 {

// Dense 64-bit float tensor, row-major. Everything in the pipeline is at most
// rank 2; rank-1 tensors are treated as a single row by the tape ops.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape_, std::vector<double> data_,
         bool requires_grad_ = false);

  std::int64_t rows() const;
  std::int64_t cols() const;
  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  static Tensor zeros(std::int64_t r, std::int64_t c);
  static Tensor matrix(std::int64_t r, std::int64_t c,
                       std::vector<double> values, bool requires_grad = false);
  static Tensor randn(std::int64_t r, std::int64_t c, double stddev,
                      std::mt19937_64& rng, bool requires_grad = true);
};

// Named parameter set with gradient accumulators. Map ordering makes every
// iteration over parameters deterministic.
struct ParamStore {
  std::map<std::string, Tensor> values;
  std::map<std::string, std::vector<double>> grads;

  Tensor& create(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return values.count(name) > 0; }
  std::vector<double>& grad(const std::string& name);
  void zero_grads();
  std::int64_t total_entries() const;
};

// N(0, 1) via Box-Muller on explicitly constructed uniforms, so results do
// not depend on the standard library's distribution implementation.
double gauss(std::mt19937_64& rng);
double uniform01(std::mt19937_64& rng);

// Reverse-mode tape. Records one forward pass; backward() may be called once,
// after which the tape refuses further use (re-record per step).
class Tape {
 public:
  struct Ref {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves.
  Ref leaf(const Tensor& t);
  Ref constant(std::int64_t r, std::int64_t c, std::vector<double> values);
  Ref constant_like(const Tensor& t) { return leaf_no_grad(t); }
  Ref zeros(std::int64_t r, std::int64_t c);
  // Leaf bound to a named parameter; the same name maps to one node per tape.
  Ref param(ParamStore& store, const std::string& name);

  // Elementwise / structural ops.
  Ref add(Ref a, Ref b);
  Ref sub(Ref a, Ref b);
  Ref mul(Ref a, Ref b);
  Ref scale(Ref a, double c);
  Ref add_const(Ref a, double c);
  Ref cmul(Ref a, const std::vector<double>& weights);  // constant elementwise
  Ref neg(Ref a) { return scale(a, -1.0); }
  Ref add_bias(Ref x, Ref bias);  // bias [1,c] broadcast over rows of x [r,c]
  Ref matmul(Ref a, Ref b, bool trans_a = false, bool trans_b = false);
  Ref linear(Ref x, Ref w, Ref bias);  // x*w + bias
  Ref concat_cols(Ref a, Ref b);
  Ref concat_rows(const std::vector<Ref>& parts);
  Ref slice_cols(Ref a, std::int64_t start, std::int64_t len);
  Ref slice_rows(Ref a, std::int64_t start, std::int64_t len);
  Ref gather_rows(Ref a, const std::vector<std::int64_t>& idx);

  // Nonlinearities and normalization.
  Ref sigmoid(Ref a);
  Ref relu(Ref a);
  Ref softmax_rows(Ref a);
  Ref log_clamped(Ref a, double eps = 1e-12);
  Ref pow_const(Ref a, double exponent);  // requires a >= 0
  Ref layer_norm(Ref x, Ref gamma, Ref beta, double eps = 1e-5);
  Ref dropout(Ref x, double rate, bool train, std::mt19937_64& rng);

  // Reductions.
  Ref sum_all(Ref a);
  Ref mean_all(Ref a);
  // Mean softmax cross-entropy over rows against integer class labels,
  // normalized by `norm` (defaults to the number of rows).
  Ref cross_entropy_mean(Ref logits, const std::vector<std::int64_t>& labels,
                         std::int64_t norm = -1);

  // Scaled dot-product attention over column-split heads. q,k,v are
  // [Tq,d] / [Tk,d]; additive_mask, when given, is Tq*Tk row-major and is
  // added to every head's scores before softmax.
  Ref attention(Ref q, Ref k, Ref v, int heads,
                const std::vector<double>* additive_mask = nullptr);

  // Backward. Loss must be 1x1. A tape can run backward exactly once.
  void backward(Ref loss);
  // Adds d(loss)/d(param) into store.grads for every param leaf on this tape.
  void accumulate_param_grads(ParamStore& store) const;

  std::int64_t rows(Ref r) const { return node(r).r; }
  std::int64_t cols(Ref r) const { return node(r).c; }
  const std::vector<double>& value(Ref r) const { return node(r).val; }
  const std::vector<double>& grad(Ref r) const;
  double scalar(Ref r) const;
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    std::int64_t r = 0;
    std::int64_t c = 0;
    std::vector<double> val;
    std::vector<double> grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back;  // empty for leaves
  };

  Ref leaf_no_grad(const Tensor& t);
  Ref make(std::int64_t r, std::int64_t c, std::vector<double> val,
           bool needs_grad, std::function<void(Tape&)> back);
  Node& node(Ref r);
  const Node& node(Ref r) const;

  // Deque keeps references to existing nodes valid while ops append new
  // ones mid-construction.
  std::deque<Node> nodes_;
  std::map<std::string, int> param_nodes_;
  bool consumed_ = false;
};

// Causal additive mask for a length-t sequence: 0 on and below the diagonal,
// -1e9 above.
std::vector<double> causal_mask(std::int64_t t);

inline constexpr double kMaskScore = -1e9;

struct GradCheckEntry {
  std::string param;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  bool pass = false;
};

// Central-difference check of analytic gradients. loss_fn(store, with_grad)
// returns the scalar loss; when with_grad it must also accumulate gradients
// into store.grads. loss_fn must be deterministic at fixed parameters; this
// is verified and violations are rejected.
GradCheckReport finite_diff_check(
    const std::function<double(ParamStore&, bool with_grad)>& loss_fn,
    ParamStore& store, double step, double tolerance);

}  // namespace tr2
