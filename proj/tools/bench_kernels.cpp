#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "tr2/kernels.hpp"
#include "tr2/tensor.hpp"

namespace {

double time_once(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

double best_of(int reps, const std::function<void()>& fn) {
  double best = time_once(fn);
  for (int i = 1; i < reps; ++i) best = std::min(best, time_once(fn));
  return best;
}

}  // namespace

int main() {
  std::mt19937_64 rng(42);
  std::printf("%8s %12s %12s %8s %6s\n", "size", "serial_ms", "parallel_ms",
              "speedup", "equal");
  for (std::int64_t n : {32, 64, 128, 256, 512}) {
    std::vector<double> a(n * n), b(n * n);
    for (auto& x : a) x = tr2::gauss(rng);
    for (auto& x : b) x = tr2::gauss(rng);
    std::vector<double> c_ref(n * n), c_par(n * n);
    const double t_ref = best_of(3, [&] {
      tr2::kernels::matmul_ref(a.data(), b.data(), c_ref.data(), n, n, n, false, false);
    });
    const double t_par = best_of(3, [&] {
      tr2::kernels::matmul(a.data(), b.data(), c_par.data(), n, n, n, false, false);
    });
    const bool equal = c_ref == c_par;
    std::printf("%8lld %12.3f %12.3f %8.2f %6s\n",
                static_cast<long long>(n), t_ref * 1e3, t_par * 1e3,
                t_ref / t_par, equal ? "yes" : "NO");
    if (!equal) return 1;
  }
  return 0;
}
