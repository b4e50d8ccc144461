#include "tr2/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "tr2/kernels.hpp"

namespace tr2 {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

std::string shape_str(std::int64_t r, std::int64_t c) {
  std::ostringstream os;
  os << "[" << r << "x" << c << "]";
  return os.str();
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape_, std::vector<double> data_,
               bool requires_grad_)
    : shape(std::move(shape_)), data(std::move(data_)),
      requires_grad(requires_grad_) {
  std::int64_t prod = 1;
  for (auto d : shape) {
    if (d <= 0) fail("tensor dimension must be positive");
    prod *= d;
  }
  if (prod != static_cast<std::int64_t>(data.size())) {
    fail("tensor data length does not match shape product");
  }
  for (double v : data) {
    if (!std::isfinite(v)) fail("tensor construction rejects non-finite data");
  }
}

std::int64_t Tensor::rows() const {
  if (shape.empty()) return 1;
  return shape.size() == 1 ? 1 : shape[0];
}

std::int64_t Tensor::cols() const {
  if (shape.empty()) return 1;
  return shape.size() == 1 ? shape[0] : shape[1];
}

Tensor Tensor::zeros(std::int64_t r, std::int64_t c) {
  return Tensor({r, c}, std::vector<double>(r * c, 0.0));
}

Tensor Tensor::matrix(std::int64_t r, std::int64_t c,
                      std::vector<double> values, bool requires_grad) {
  return Tensor({r, c}, std::move(values), requires_grad);
}

Tensor Tensor::randn(std::int64_t r, std::int64_t c, double stddev,
                     std::mt19937_64& rng, bool requires_grad) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = stddev * gauss(rng);
  return Tensor({r, c}, std::move(v), requires_grad);
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double gauss(std::mt19937_64& rng) {
  // Box-Muller; discards the second variate to keep call sites stateless.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor& ParamStore::create(const std::string& name, Tensor init) {
  auto [it, inserted] = values.emplace(name, std::move(init));
  if (!inserted) fail("parameter already exists: " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end()) fail("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) fail("unknown parameter: " + name);
  return it->second;
}

std::vector<double>& ParamStore::grad(const std::string& name) {
  auto& g = grads[name];
  g.resize(get(name).data.size(), 0.0);
  return g;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : values) {
    auto& g = grads[name];
    g.assign(t.data.size(), 0.0);
  }
}

std::int64_t ParamStore::total_entries() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : values) n += t.size();
  return n;
}

Tape::Node& Tape::node(Ref r) {
  if (!r.valid() || r.id >= static_cast<int>(nodes_.size())) {
    fail("invalid tape reference");
  }
  return nodes_[r.id];
}

const Tape::Node& Tape::node(Ref r) const {
  if (!r.valid() || r.id >= static_cast<int>(nodes_.size())) {
    fail("invalid tape reference");
  }
  return nodes_[r.id];
}

Tape::Ref Tape::make(std::int64_t r, std::int64_t c, std::vector<double> val,
                     bool needs_grad, std::function<void(Tape&)> back) {
  if (consumed_) fail("tape already consumed by backward; re-record");
  Node n;
  n.r = r;
  n.c = c;
  n.val = std::move(val);
  n.grad.assign(n.val.size(), 0.0);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Ref{static_cast<int>(nodes_.size()) - 1};
}

Tape::Ref Tape::leaf(const Tensor& t) {
  return make(t.rows(), t.cols(), t.data, t.requires_grad, nullptr);
}

Tape::Ref Tape::leaf_no_grad(const Tensor& t) {
  return make(t.rows(), t.cols(), t.data, false, nullptr);
}

Tape::Ref Tape::constant(std::int64_t r, std::int64_t c,
                         std::vector<double> values) {
  if (static_cast<std::int64_t>(values.size()) != r * c) {
    fail("constant data length mismatch");
  }
  return make(r, c, std::move(values), false, nullptr);
}

Tape::Ref Tape::zeros(std::int64_t r, std::int64_t c) {
  return make(r, c, std::vector<double>(r * c, 0.0), false, nullptr);
}

Tape::Ref Tape::param(ParamStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return Ref{it->second};
  const Tensor& t = store.get(name);
  Ref r = make(t.rows(), t.cols(), t.data, true, nullptr);
  param_nodes_[name] = r.id;
  return r;
}

Tape::Ref Tape::add(Ref a, Ref b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.r != nb.r || na.c != nb.c) {
    fail("add: shape mismatch " + shape_str(na.r, na.c) + " vs " +
         shape_str(nb.r, nb.c));
  }
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] + nb.val[i];
  Ref self = make(na.r, na.c, std::move(out),
                  na.needs_grad || nb.needs_grad, nullptr);
  node(self).back = [a, b, self](Tape& t) {
    const auto& g = t.node(self).grad;
    if (t.node(a).needs_grad) {
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.node(b).needs_grad) {
      auto& gb = t.node(b).grad;
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  };
  return self;
}

Tape::Ref Tape::sub(Ref a, Ref b) { return add(a, scale(b, -1.0)); }

Tape::Ref Tape::mul(Ref a, Ref b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.r != nb.r || na.c != nb.c) {
    fail("mul: shape mismatch " + shape_str(na.r, na.c) + " vs " +
         shape_str(nb.r, nb.c));
  }
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * nb.val[i];
  Ref self = make(na.r, na.c, std::move(out),
                  na.needs_grad || nb.needs_grad, nullptr);
  node(self).back = [a, b, self](Tape& t) {
    const auto& g = t.node(self).grad;
    if (t.node(a).needs_grad) {
      auto& ga = t.node(a).grad;
      const auto& vb = t.node(b).val;
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.node(b).needs_grad) {
      auto& gb = t.node(b).grad;
      const auto& va = t.node(a).val;
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  };
  return self;
}

Tape::Ref Tape::scale(Ref a, double c) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * c;
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, c, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  };
  return self;
}

Tape::Ref Tape::add_const(Ref a, double c) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] + c;
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  };
  return self;
}

Tape::Ref Tape::cmul(Ref a, const std::vector<double>& weights) {
  const Node& na = node(a);
  if (weights.size() != na.val.size()) fail("cmul: weight length mismatch");
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * weights[i];
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, weights, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * weights[i];
  };
  return self;
}

Tape::Ref Tape::add_bias(Ref x, Ref bias) {
  const Node& nx = node(x);
  const Node& nb = node(bias);
  if (nb.r != 1 || nb.c != nx.c) {
    fail("add_bias: bias " + shape_str(nb.r, nb.c) + " incompatible with " +
         shape_str(nx.r, nx.c));
  }
  std::vector<double> out(nx.val.size());
  for (std::int64_t i = 0; i < nx.r; ++i) {
    for (std::int64_t j = 0; j < nx.c; ++j) {
      out[i * nx.c + j] = nx.val[i * nx.c + j] + nb.val[j];
    }
  }
  Ref self = make(nx.r, nx.c, std::move(out),
                  nx.needs_grad || nb.needs_grad, nullptr);
  node(self).back = [x, bias, self](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& n = t.node(self);
    if (t.node(x).needs_grad) {
      auto& gx = t.node(x).grad;
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.node(bias).needs_grad) {
      auto& gb = t.node(bias).grad;
      for (std::int64_t i = 0; i < n.r; ++i) {
        for (std::int64_t j = 0; j < n.c; ++j) gb[j] += g[i * n.c + j];
      }
    }
  };
  return self;
}

Tape::Ref Tape::matmul(Ref a, Ref b, bool trans_a, bool trans_b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  const std::int64_t m = trans_a ? na.c : na.r;
  const std::int64_t ka = trans_a ? na.r : na.c;
  const std::int64_t kb = trans_b ? nb.c : nb.r;
  const std::int64_t n = trans_b ? nb.r : nb.c;
  if (ka != kb) {
    fail("matmul: inner dimension mismatch " + shape_str(na.r, na.c) +
         (trans_a ? "^T" : "") + " vs " + shape_str(nb.r, nb.c) +
         (trans_b ? "^T" : ""));
  }
  std::vector<double> out(m * n);
  kernels::matmul(na.val.data(), nb.val.data(), out.data(), m, ka, n, trans_a,
                  trans_b);
  Ref self = make(m, n, std::move(out), na.needs_grad || nb.needs_grad,
                  nullptr);
  node(self).back = [a, b, trans_a, trans_b, m, n, ka, self](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& va = t.node(a).val;
    const auto& vb = t.node(b).val;
    if (t.node(a).needs_grad) {
      std::vector<double> da(va.size());
      if (!trans_a) {
        // dA = G * op(B)^T
        kernels::matmul(g.data(), vb.data(), da.data(), m, n, ka, false,
                        !trans_b);
      } else {
        // A is k x m stored; dA = op(B) * G^T with op per trans_b
        kernels::matmul(vb.data(), g.data(), da.data(), ka, n, m, trans_b,
                        true);
      }
      auto& ga = t.node(a).grad;
      for (size_t i = 0; i < da.size(); ++i) ga[i] += da[i];
    }
    if (t.node(b).needs_grad) {
      std::vector<double> db(vb.size());
      if (!trans_b) {
        // dB = op(A)^T * G
        kernels::matmul(va.data(), g.data(), db.data(), ka, m, n, !trans_a,
                        false);
      } else {
        // B is n x k stored; dB = G^T * op(A)
        kernels::matmul(g.data(), va.data(), db.data(), n, m, ka, true,
                        trans_a);
      }
      auto& gb = t.node(b).grad;
      for (size_t i = 0; i < db.size(); ++i) gb[i] += db[i];
    }
  };
  return self;
}

Tape::Ref Tape::linear(Ref x, Ref w, Ref bias) {
  return add_bias(matmul(x, w), bias);
}

Tape::Ref Tape::concat_cols(Ref a, Ref b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.r != nb.r) {
    fail("concat_cols: row mismatch " + shape_str(na.r, na.c) + " vs " +
         shape_str(nb.r, nb.c));
  }
  const std::int64_t c = na.c + nb.c;
  std::vector<double> out(na.r * c);
  for (std::int64_t i = 0; i < na.r; ++i) {
    std::copy_n(na.val.begin() + i * na.c, na.c, out.begin() + i * c);
    std::copy_n(nb.val.begin() + i * nb.c, nb.c, out.begin() + i * c + na.c);
  }
  Ref self = make(na.r, c, std::move(out), na.needs_grad || nb.needs_grad,
                  nullptr);
  const std::int64_t ca = na.c;
  const std::int64_t cb = nb.c;
  node(self).back = [a, b, ca, cb, self](Tape& t) {
    const auto& g = t.node(self).grad;
    const std::int64_t rows = t.node(self).r;
    const std::int64_t c = ca + cb;
    if (t.node(a).needs_grad) {
      auto& ga = t.node(a).grad;
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * c + j];
      }
    }
    if (t.node(b).needs_grad) {
      auto& gb = t.node(b).grad;
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cb; ++j) {
          gb[i * cb + j] += g[i * c + ca + j];
        }
      }
    }
  };
  return self;
}

Tape::Ref Tape::concat_rows(const std::vector<Ref>& parts) {
  if (parts.empty()) fail("concat_rows: empty part list");
  const std::int64_t c = node(parts[0]).c;
  std::int64_t r = 0;
  bool ng = false;
  for (Ref p : parts) {
    if (node(p).c != c) fail("concat_rows: column mismatch");
    r += node(p).r;
    ng = ng || node(p).needs_grad;
  }
  std::vector<double> out;
  out.reserve(r * c);
  for (Ref p : parts) {
    const auto& v = node(p).val;
    out.insert(out.end(), v.begin(), v.end());
  }
  Ref self = make(r, c, std::move(out), ng, nullptr);
  node(self).back = [parts, self](Tape& t) {
    const auto& g = t.node(self).grad;
    size_t off = 0;
    for (Ref p : parts) {
      auto& np = t.node(p);
      if (np.needs_grad) {
        for (size_t i = 0; i < np.grad.size(); ++i) np.grad[i] += g[off + i];
      }
      off += np.val.size();
    }
  };
  return self;
}

Tape::Ref Tape::slice_cols(Ref a, std::int64_t start, std::int64_t len) {
  const Node& na = node(a);
  if (start < 0 || len <= 0 || start + len > na.c) {
    fail("slice_cols: out of range");
  }
  std::vector<double> out(na.r * len);
  for (std::int64_t i = 0; i < na.r; ++i) {
    std::copy_n(na.val.begin() + i * na.c + start, len, out.begin() + i * len);
  }
  Ref self = make(na.r, len, std::move(out), na.needs_grad, nullptr);
  const std::int64_t ac = na.c;
  node(self).back = [a, start, len, ac, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    auto& ga = t.node(a).grad;
    const std::int64_t rows = t.node(self).r;
    for (std::int64_t i = 0; i < rows; ++i) {
      for (std::int64_t j = 0; j < len; ++j) {
        ga[i * ac + start + j] += g[i * len + j];
      }
    }
  };
  return self;
}

Tape::Ref Tape::slice_rows(Ref a, std::int64_t start, std::int64_t len) {
  const Node& na = node(a);
  if (start < 0 || len <= 0 || start + len > na.r) {
    fail("slice_rows: out of range");
  }
  std::vector<double> out(na.val.begin() + start * na.c,
                          na.val.begin() + (start + len) * na.c);
  Ref self = make(len, na.c, std::move(out), na.needs_grad, nullptr);
  const std::int64_t c = na.c;
  node(self).back = [a, start, c, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[start * c + i] += g[i];
  };
  return self;
}

Tape::Ref Tape::gather_rows(Ref a, const std::vector<std::int64_t>& idx) {
  const Node& na = node(a);
  for (auto i : idx) {
    if (i < 0 || i >= na.r) fail("gather_rows: index out of range");
  }
  std::vector<double> out(idx.size() * na.c);
  for (size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(na.val.begin() + idx[k] * na.c, na.c,
                out.begin() + static_cast<std::int64_t>(k) * na.c);
  }
  Ref self = make(static_cast<std::int64_t>(idx.size()), na.c, std::move(out),
                  na.needs_grad, nullptr);
  const std::int64_t c = na.c;
  node(self).back = [a, idx, c, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    auto& ga = t.node(a).grad;
    for (size_t k = 0; k < idx.size(); ++k) {
      for (std::int64_t j = 0; j < c; ++j) {
        ga[idx[k] * c + j] += g[static_cast<std::int64_t>(k) * c + j];
      }
    }
  };
  return self;
}

Tape::Ref Tape::sigmoid(Ref a) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = na.val[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    const auto& y = t.node(self).val;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  };
  return self;
}

Tape::Ref Tape::relu(Ref a) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, na.val[i]);
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    const auto& x = t.node(a).val;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
  };
  return self;
}

Tape::Ref Tape::softmax_rows(Ref a) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (std::int64_t i = 0; i < na.r; ++i) {
    const double* x = na.val.data() + i * na.c;
    double* y = out.data() + i * na.c;
    double mx = x[0];
    for (std::int64_t j = 1; j < na.c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < na.c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::int64_t j = 0; j < na.c; ++j) y[j] /= sum;
  }
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& n = t.node(self);
    const auto& g = n.grad;
    const auto& y = n.val;
    auto& ga = t.node(a).grad;
    for (std::int64_t i = 0; i < n.r; ++i) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < n.c; ++j) {
        dot += g[i * n.c + j] * y[i * n.c + j];
      }
      for (std::int64_t j = 0; j < n.c; ++j) {
        ga[i * n.c + j] += y[i * n.c + j] * (g[i * n.c + j] - dot);
      }
    }
  };
  return self;
}

Tape::Ref Tape::log_clamped(Ref a, double eps) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::log(std::max(na.val[i], eps));
  }
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, eps, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const auto& g = t.node(self).grad;
    const auto& x = t.node(a).val;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] / std::max(x[i], eps);
    }
  };
  return self;
}

Tape::Ref Tape::pow_const(Ref a, double exponent) {
  const Node& na = node(a);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (na.val[i] < 0.0) fail("pow_const requires non-negative base");
    out[i] = std::pow(na.val[i], exponent);
  }
  Ref self = make(na.r, na.c, std::move(out), na.needs_grad, nullptr);
  node(self).back = [a, exponent, self](Tape& t) {
    if (!t.node(a).needs_grad || exponent == 0.0) return;
    const auto& g = t.node(self).grad;
    const auto& x = t.node(a).val;
    auto& ga = t.node(a).grad;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * exponent * std::pow(x[i], exponent - 1.0);
    }
  };
  return self;
}

Tape::Ref Tape::layer_norm(Ref x, Ref gamma, Ref beta, double eps) {
  const Node& nx = node(x);
  const Node& ngm = node(gamma);
  const Node& nbt = node(beta);
  if (ngm.r != 1 || ngm.c != nx.c || nbt.r != 1 || nbt.c != nx.c) {
    fail("layer_norm: scale/shift must be [1," + std::to_string(nx.c) + "]");
  }
  const std::int64_t c = nx.c;
  std::vector<double> out(nx.val.size());
  std::vector<double> xhat(nx.val.size());
  std::vector<double> inv_std(nx.r);
  for (std::int64_t i = 0; i < nx.r; ++i) {
    const double* xi = nx.val.data() + i * c;
    double mu = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      var += (xi[j] - mu) * (xi[j] - mu);
    }
    var /= static_cast<double>(c);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[i] = s;
    for (std::int64_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mu) * s;
      out[i * c + j] = ngm.val[j] * xhat[i * c + j] + nbt.val[j];
    }
  }
  const bool ng = nx.needs_grad || ngm.needs_grad || nbt.needs_grad;
  Ref self = make(nx.r, c, std::move(out), ng, nullptr);
  node(self).back = [x, gamma, beta, xhat = std::move(xhat),
                     inv_std = std::move(inv_std), c, self](Tape& t) {
    const auto& g = t.node(self).grad;
    const std::int64_t rows = t.node(self).r;
    const auto& gm = t.node(gamma).val;
    if (t.node(gamma).needs_grad) {
      auto& gg = t.node(gamma).grad;
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          gg[j] += g[i * c + j] * xhat[i * c + j];
        }
      }
    }
    if (t.node(beta).needs_grad) {
      auto& gb = t.node(beta).grad;
      for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    }
    if (t.node(x).needs_grad) {
      auto& gx = t.node(x).grad;
      const double cn = static_cast<double>(c);
      for (std::int64_t i = 0; i < rows; ++i) {
        double sum_dh = 0.0;
        double sum_dh_xhat = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
          const double dh = g[i * c + j] * gm[j];
          sum_dh += dh;
          sum_dh_xhat += dh * xhat[i * c + j];
        }
        for (std::int64_t j = 0; j < c; ++j) {
          const double dh = g[i * c + j] * gm[j];
          gx[i * c + j] += inv_std[i] *
                           (dh - sum_dh / cn - xhat[i * c + j] * sum_dh_xhat / cn);
        }
      }
    }
  };
  return self;
}

Tape::Ref Tape::dropout(Ref x, double rate, bool train, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout rate must be in [0,1)");
  const Node& nx = node(x);
  if (!train || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(nx.val.size());
  for (auto& m : mask) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  return cmul(x, mask);
}

Tape::Ref Tape::sum_all(Ref a) {
  const Node& na = node(a);
  double s = 0.0;
  for (double v : na.val) s += v;
  Ref self = make(1, 1, {s}, na.needs_grad, nullptr);
  node(self).back = [a, self](Tape& t) {
    if (!t.node(a).needs_grad) return;
    const double g = t.node(self).grad[0];
    auto& ga = t.node(a).grad;
    for (auto& v : ga) v += g;
  };
  return self;
}

Tape::Ref Tape::mean_all(Ref a) {
  const Node& na = node(a);
  return scale(sum_all(a), 1.0 / static_cast<double>(na.val.size()));
}

Tape::Ref Tape::cross_entropy_mean(Ref logits,
                                   const std::vector<std::int64_t>& labels,
                                   std::int64_t norm) {
  const Node& nl = node(logits);
  if (static_cast<std::int64_t>(labels.size()) != nl.r) {
    fail("cross_entropy_mean: one label per row required");
  }
  const std::int64_t c = nl.c;
  for (auto l : labels) {
    if (l < 0 || l >= c) fail("cross_entropy_mean: label out of range");
  }
  const double denom = static_cast<double>(norm > 0 ? norm : nl.r);
  double total = 0.0;
  std::vector<double> probs(nl.val.size());
  for (std::int64_t i = 0; i < nl.r; ++i) {
    const double* x = nl.val.data() + i * c;
    double mx = x[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(x[j] - mx);
      sum += probs[i * c + j];
    }
    for (std::int64_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
    total += std::log(sum) + mx - x[labels[i]];
  }
  Ref self = make(1, 1, {total / denom}, nl.needs_grad, nullptr);
  node(self).back = [logits, labels, probs = std::move(probs), c, denom,
                     self](Tape& t) {
    if (!t.node(logits).needs_grad) return;
    const double g = t.node(self).grad[0];
    auto& gl = t.node(logits).grad;
    for (size_t i = 0; i < labels.size(); ++i) {
      for (std::int64_t j = 0; j < c; ++j) {
        double d = probs[i * c + j];
        if (static_cast<std::int64_t>(j) == labels[i]) d -= 1.0;
        gl[i * c + j] += g * d / denom;
      }
    }
  };
  return self;
}

Tape::Ref Tape::attention(Ref q, Ref k, Ref v, int heads,
                          const std::vector<double>* additive_mask) {
  const Node& nq = node(q);
  const Node& nk = node(k);
  const Node& nv = node(v);
  if (nq.c != nk.c || nk.c != nv.c || nk.r != nv.r) {
    fail("attention: incompatible q/k/v shapes");
  }
  if (heads <= 0 || nq.c % heads != 0) {
    fail("attention: head count " + std::to_string(heads) +
         " does not divide model dimension " + std::to_string(nq.c));
  }
  if (additive_mask &&
      static_cast<std::int64_t>(additive_mask->size()) != nq.r * nk.r) {
    fail("attention: mask size mismatch");
  }
  const std::int64_t dh = nq.c / heads;
  Ref mask_ref;
  if (additive_mask) {
    mask_ref = constant(nq.r, nk.r, *additive_mask);
  }
  Ref out;
  for (int h = 0; h < heads; ++h) {
    Ref qh = slice_cols(q, h * dh, dh);
    Ref kh = slice_cols(k, h * dh, dh);
    Ref vh = slice_cols(v, h * dh, dh);
    Ref scores = scale(matmul(qh, kh, false, true),
                       1.0 / std::sqrt(static_cast<double>(dh)));
    if (additive_mask) scores = add(scores, mask_ref);
    Ref weights = softmax_rows(scores);
    Ref oh = matmul(weights, vh);
    out = h == 0 ? oh : concat_cols(out, oh);
  }
  return out;
}

void Tape::backward(Ref loss) {
  if (consumed_) fail("tape already consumed by backward; re-record");
  const Node& nl = node(loss);
  if (nl.r != 1 || nl.c != 1) {
    fail("backward requires a scalar loss, got " + shape_str(nl.r, nl.c));
  }
  consumed_ = true;
  nodes_[loss.id].grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.back) n.back(*this);
  }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
  if (!consumed_) fail("accumulate_param_grads before backward");
  for (const auto& [name, id] : param_nodes_) {
    const Node& n = nodes_[id];
    auto& g = store.grad(name);
    for (size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  }
}

const std::vector<double>& Tape::grad(Ref r) const {
  if (!consumed_) fail("gradient requested before backward");
  return node(r).grad;
}

double Tape::scalar(Ref r) const {
  const Node& n = node(r);
  if (n.r != 1 || n.c != 1) fail("scalar() on non-scalar node");
  return n.val[0];
}

std::vector<double> causal_mask(std::int64_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t j = i + 1; j < t; ++j) m[i * t + j] = kMaskScore;
  }
  return m;
}

GradCheckReport finite_diff_check(
    const std::function<double(ParamStore&, bool with_grad)>& loss_fn,
    ParamStore& store, double step, double tolerance) {
  if (step <= 0.0) fail("finite_diff_check: step must be positive");
  const double base1 = loss_fn(store, false);
  const double base2 = loss_fn(store, false);
  if (base1 != base2) {
    fail("finite_diff_check: loss function is not deterministic");
  }
  store.zero_grads();
  loss_fn(store, true);
  auto analytic = store.grads;  // copy; perturbed evals may touch grads

  GradCheckReport report;
  for (auto& [name, tensor] : store.values) {
    const auto& ag = analytic[name];
    for (std::int64_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor.data[i];
      tensor.data[i] = saved + step;
      const double fp = loss_fn(store, false);
      tensor.data[i] = saved - step;
      const double fm = loss_fn(store, false);
      tensor.data[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = ag.empty() ? 0.0 : ag[i];
      const double denom =
          std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = {name, i, a, numeric, rel};
      }
    }
  }
  store.grads = std::move(analytic);
  report.pass = report.max_rel_err <= tolerance;
  return report;
}

}  // namespace tr2
