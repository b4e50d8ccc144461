#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "tr2/checkpoint.hpp"
#include "tr2/kernels.hpp"
#include "tr2/tensor.hpp"

using tr2::ParamStore;
using tr2::Tape;
using tr2::Tensor;

namespace {

using LossBuilder = std::function<Tape::Ref(Tape&, ParamStore&)>;

tr2::GradCheckReport check(ParamStore& store, const LossBuilder& build,
                           double step = 1e-5, double tol = 1e-4) {
  auto fn = [&](ParamStore& s, bool with_grad) {
    Tape tape;
    Tape::Ref loss = build(tape, s);
    const double v = tape.scalar(loss);
    if (with_grad) {
      tape.backward(loss);
      tape.accumulate_param_grads(s);
    }
    return v;
  };
  return tr2::finite_diff_check(fn, store, step, tol);
}

ParamStore two_params(std::int64_t r, std::int64_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  store.create("a", Tensor::randn(r, c, 0.7, rng));
  store.create("b", Tensor::randn(r, c, 0.7, rng));
  return store;
}

}  // namespace

TEST_CASE("deterministic rng helpers") {
  std::mt19937_64 r1(99), r2(99);
  for (int i = 0; i < 100; ++i) {
    const double u = tr2::uniform01(r1);
    CHECK(u == tr2::uniform01(r2));
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  std::mt19937_64 r3(99), r4(99);
  for (int i = 0; i < 100; ++i) CHECK(tr2::gauss(r3) == tr2::gauss(r4));
}

TEST_CASE("elementwise op gradients") {
  ParamStore store = two_params(3, 4, 1);
  SUBCASE("add") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      return t.sum_all(t.add(t.param(s, "a"), t.param(s, "b")));
    });
    CHECK(rep.pass);
  }
  SUBCASE("sub mul chain") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      Tape::Ref a = t.param(s, "a");
      Tape::Ref b = t.param(s, "b");
      return t.sum_all(t.mul(t.sub(a, b), t.add(a, b)));
    });
    CHECK(rep.pass);
  }
  SUBCASE("scale add_const cmul") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      std::vector<double> w(12);
      for (size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * (double)i - 0.5;
      return t.sum_all(
          t.cmul(t.add_const(t.scale(t.param(s, "a"), 1.7), 0.3), w));
    });
    CHECK(rep.pass);
  }
  SUBCASE("sigmoid relu composite") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      return t.mean_all(
          t.mul(t.sigmoid(t.param(s, "a")), t.relu(t.param(s, "b"))));
    });
    CHECK(rep.pass);
  }
  SUBCASE("log_clamped pow_const") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      Tape::Ref p = t.sigmoid(t.param(s, "a"));
      return t.sum_all(t.mul(t.pow_const(p, 2.0), t.log_clamped(p)));
    });
    CHECK(rep.pass);
  }
}

TEST_CASE("matmul gradients under every transpose flag") {
  std::mt19937_64 rng(7);
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      ParamStore store;
      store.create("a", Tensor::randn(ta ? 4 : 3, ta ? 3 : 4, 0.5, rng));
      store.create("b", Tensor::randn(tb ? 5 : 4, tb ? 4 : 5, 0.5, rng));
      auto rep = check(store, [ta, tb](Tape& t, ParamStore& s) {
        return t.sum_all(
            t.matmul(t.param(s, "a"), t.param(s, "b"), ta != 0, tb != 0));
      });
      CHECK_MESSAGE(rep.pass, "ta=", ta, " tb=", tb,
                    " err=", rep.max_rel_err);
    }
  }
}

TEST_CASE("structural op gradients") {
  std::mt19937_64 rng(11);
  ParamStore store;
  store.create("x", Tensor::randn(4, 6, 0.8, rng));
  store.create("bias", Tensor::randn(1, 6, 0.8, rng));
  SUBCASE("add_bias") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      return t.sum_all(
          t.mul(t.add_bias(t.param(s, "x"), t.param(s, "bias")),
                t.param(s, "x")));
    });
    CHECK(rep.pass);
  }
  SUBCASE("concat slice gather") {
    auto rep = check(store, [](Tape& t, ParamStore& s) {
      Tape::Ref x = t.param(s, "x");
      Tape::Ref cat = t.concat_cols(t.slice_cols(x, 0, 3),
                                    t.slice_cols(x, 3, 3));
      Tape::Ref rows = t.concat_rows(
          {t.slice_rows(cat, 0, 2), t.gather_rows(cat, {3, 1, 1})});
      return t.mean_all(t.mul(rows, rows));
    });
    CHECK(rep.pass);
  }
}

TEST_CASE("softmax rows sum to one and gradient passes") {
  std::mt19937_64 rng(13);
  ParamStore store;
  store.create("x", Tensor::randn(3, 5, 1.2, rng));
  Tape tape;
  Tape::Ref sm = tape.softmax_rows(tape.param(store, "x"));
  const auto& v = tape.value(sm);
  for (int r = 0; r < 3; ++r) {
    double sum = 0;
    for (int c = 0; c < 5; ++c) sum += v[r * 5 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  std::vector<double> w(15);
  for (size_t i = 0; i < w.size(); ++i) w[i] = std::sin((double)i);
  auto rep = check(store, [&w](Tape& t, ParamStore& s) {
    return t.sum_all(t.cmul(t.softmax_rows(t.param(s, "x")), w));
  });
  CHECK(rep.pass);
}

TEST_CASE("layer_norm normalizes and differentiates") {
  std::mt19937_64 rng(17);
  ParamStore store;
  store.create("x", Tensor::randn(3, 8, 1.5, rng));
  store.create("g", Tensor::randn(1, 8, 0.3, rng));
  store.create("beta", Tensor::randn(1, 8, 0.3, rng));

  {
    ParamStore unit;
    unit.create("x", store.get("x"));
    Tensor ones = Tensor::zeros(1, 8);
    for (auto& v : ones.data) v = 1.0;
    unit.create("g", ones);
    unit.create("beta", Tensor::zeros(1, 8));
    Tape tape;
    Tape::Ref y = tape.layer_norm(tape.param(unit, "x"),
                                  tape.param(unit, "g"),
                                  tape.param(unit, "beta"));
    const auto& v = tape.value(y);
    for (int r = 0; r < 3; ++r) {
      double mean = 0, var = 0;
      for (int c = 0; c < 8; ++c) mean += v[r * 8 + c];
      mean /= 8;
      for (int c = 0; c < 8; ++c) {
        var += (v[r * 8 + c] - mean) * (v[r * 8 + c] - mean);
      }
      CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
      CHECK(var / 8 == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
  std::vector<double> w(24);
  for (size_t i = 0; i < w.size(); ++i) w[i] = std::cos(0.3 * (double)i);
  auto rep = check(store, [&w](Tape& t, ParamStore& s) {
    return t.sum_all(t.cmul(
        t.layer_norm(t.param(s, "x"), t.param(s, "g"), t.param(s, "beta")),
        w));
  });
  CHECK(rep.pass);
}

TEST_CASE("dropout identities") {
  std::mt19937_64 rng(19);
  Tensor x = Tensor::randn(4, 4, 1.0, rng, false);
  Tape tape;
  Tape::Ref in = tape.constant_like(x);
  std::mt19937_64 drng(5);
  SUBCASE("eval mode is identity") {
    Tape::Ref out = tape.dropout(in, 0.5, false, drng);
    CHECK(tape.value(out) == x.data);
  }
  SUBCASE("zero rate is identity") {
    Tape::Ref out = tape.dropout(in, 0.0, true, drng);
    CHECK(tape.value(out) == x.data);
  }
  SUBCASE("train mode zeros or rescales") {
    Tape::Ref out = tape.dropout(in, 0.5, true, drng);
    const auto& v = tape.value(out);
    bool any_zero = false;
    for (size_t i = 0; i < v.size(); ++i) {
      const bool zeroed = v[i] == 0.0;
      const bool scaled =
          std::abs(v[i] - x.data[i] / 0.5) < 1e-12 * std::abs(x.data[i]);
      CHECK((zeroed || scaled));
      any_zero = any_zero || zeroed;
    }
    CHECK(any_zero);
  }
}

TEST_CASE("cross_entropy_mean equals ln C on uniform logits") {
  Tape tape;
  Tape::Ref logits = tape.zeros(3, 7);
  Tape::Ref loss = tape.cross_entropy_mean(logits, {0, 3, 6});
  CHECK(tape.scalar(loss) == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy gradient") {
  std::mt19937_64 rng(23);
  ParamStore store;
  store.create("x", Tensor::randn(4, 5, 1.0, rng));
  auto rep = check(store, [](Tape& t, ParamStore& s) {
    return t.cross_entropy_mean(t.param(s, "x"), {1, 0, 4, 2});
  });
  CHECK(rep.pass);
}

TEST_CASE("attention matches a scalar-loop oracle") {
  const int tq = 3, tk = 4, d = 6, heads = 2, dh = d / heads;
  std::mt19937_64 rng(29);
  Tensor q = Tensor::randn(tq, d, 0.9, rng, false);
  Tensor k = Tensor::randn(tk, d, 0.9, rng, false);
  Tensor v = Tensor::randn(tk, d, 0.9, rng, false);

  Tape tape;
  Tape::Ref out = tape.attention(tape.constant_like(q), tape.constant_like(k),
                                 tape.constant_like(v), heads);
  const auto& got = tape.value(out);

  const double scale = 1.0 / std::sqrt((double)dh);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < tq; ++i) {
      std::vector<double> scores(tk);
      double mx = -1e300;
      for (int j = 0; j < tk; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c) {
          s += q.data[i * d + h * dh + c] * k.data[j * d + h * dh + c];
        }
        scores[j] = s * scale;
        mx = std::max(mx, scores[j]);
      }
      double z = 0;
      for (int j = 0; j < tk; ++j) z += std::exp(scores[j] - mx);
      for (int c = 0; c < dh; ++c) {
        double expect = 0;
        for (int j = 0; j < tk; ++j) {
          expect += std::exp(scores[j] - mx) / z * v.data[j * d + h * dh + c];
        }
        CHECK(got[i * d + h * dh + c] ==
              doctest::Approx(expect).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("causal mask blocks the future") {
  const auto m = tr2::causal_mask(3);
  REQUIRE(m.size() == 9);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(m[i * 3 + j] == (j <= i ? 0.0 : tr2::kMaskScore));
    }
  }
}

TEST_CASE("masked attention gradient") {
  std::mt19937_64 rng(31);
  ParamStore store;
  store.create("q", Tensor::randn(3, 4, 0.8, rng));
  store.create("k", Tensor::randn(3, 4, 0.8, rng));
  store.create("v", Tensor::randn(3, 4, 0.8, rng));
  const auto mask = tr2::causal_mask(3);
  auto rep = check(store, [&mask](Tape& t, ParamStore& s) {
    return t.sum_all(t.attention(t.param(s, "q"), t.param(s, "k"),
                                 t.param(s, "v"), 2, &mask));
  });
  CHECK(rep.pass);
}

TEST_CASE("tape is one-shot") {
  Tape tape;
  Tape::Ref x = tape.constant(1, 1, {2.0});
  Tape::Ref y = tape.scale(x, 3.0);
  tape.backward(y);
  CHECK(tape.consumed());
  CHECK_THROWS(tape.backward(y));
  CHECK_THROWS(tape.scale(y, 1.0));
}

TEST_CASE("finite_diff_check rejects nondeterministic functions") {
  ParamStore store;
  std::mt19937_64 rng(37);
  store.create("a", Tensor::randn(2, 2, 1.0, rng));
  int calls = 0;
  auto fn = [&calls](ParamStore& s, bool) {
    ++calls;
    return s.get("a").data[0] + 1e-3 * (double)calls;
  };
  CHECK_THROWS(tr2::finite_diff_check(fn, store, 1e-5, 1e-4));
}

TEST_CASE("parallel matmul is bitwise equal to the serial reference") {
  std::mt19937_64 rng(41);
  for (auto [m, k, n] : std::vector<std::array<std::int64_t, 3>>{
           {3, 4, 5}, {40, 40, 40}, {65, 33, 50}}) {
    std::vector<double> a(m * k), b(k * n);
    for (auto& x : a) x = tr2::gauss(rng);
    for (auto& x : b) x = tr2::gauss(rng);
    for (int ta = 0; ta < 2; ++ta) {
      for (int tb = 0; tb < 2; ++tb) {
        std::vector<double> c1(m * n), c2(m * n);
        tr2::kernels::matmul_ref(a.data(), b.data(), c1.data(), m, k, n,
                                 ta != 0, tb != 0);
        tr2::kernels::matmul(a.data(), b.data(), c2.data(), m, k, n, ta != 0,
                             tb != 0);
        CHECK(c1 == c2);
      }
    }
  }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  std::mt19937_64 rng(43);
  ParamStore store;
  store.create("alpha", Tensor::randn(3, 5, 1.7, rng));
  store.create("beta.nested.name", Tensor::randn(1, 9, 0.2, rng));
  Tensor odd = Tensor::matrix(2, 2, {1e-300, -0.0, 3.5, 1e300});
  store.create("gamma", odd);

  const std::string path = "/tmp/tr2_test_ckpt.bin";
  tr2::save_checkpoint(store, path);
  ParamStore loaded = tr2::load_checkpoint(path);
  REQUIRE(loaded.values.size() == store.values.size());
  for (const auto& [name, t] : store.values) {
    REQUIRE(loaded.has(name));
    const Tensor& u = loaded.get(name);
    CHECK(u.shape == t.shape);
    REQUIRE(u.data.size() == t.data.size());
    for (size_t i = 0; i < t.data.size(); ++i) {
      CHECK(std::memcmp(&u.data[i], &t.data[i], sizeof(double)) == 0);
    }
  }
  std::remove(path.c_str());
}
