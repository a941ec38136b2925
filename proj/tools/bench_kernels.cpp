// Times the OpenMP kernels against the serial references at the shapes
// the synthetic experiment actually runs, and reports the speedup.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "cguard/kernels.hpp"
#include "cguard/rng.hpp"

using namespace cguard;

namespace {

double time_call(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.next_uniform(-1.0, 1.0);
  return v;
}

void report(const char* name, double flops, double serial_s, double omp_s) {
  std::printf("%-24s serial %8.2f ms (%6.2f GF/s)   omp %8.2f ms (%6.2f GF/s)   speedup %.2fx\n",
              name, serial_s * 1e3, flops / serial_s * 1e-9, omp_s * 1e3,
              flops / omp_s * 1e-9, serial_s / omp_s);
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t batch = 64;
  int reps = 3;
  if (argc > 1) batch = std::strtoull(argv[1], nullptr, 10);
  if (argc > 2) reps = std::atoi(argv[2]);
  std::printf("batch %zu, omp threads %d\n", batch, omp_get_max_threads());

  Rng rng(123);
  const std::size_t hw = 32, map = hw * hw;

  {  // conv 16->32 at 32x32, the dominant layer
    const std::size_t ic = 16, oc = 32;
    const auto x = random_vec(batch * ic * map, rng);
    const auto w = random_vec(oc * ic * 9, rng);
    const auto b = random_vec(oc, rng);
    const auto g = random_vec(batch * oc * map, rng);
    std::vector<double> y(batch * oc * map), dx(batch * ic * map), dw(oc * ic * 9), db(oc);
    const double fwd_flops = 2.0 * batch * oc * ic * 9 * map;

    report("conv fwd", fwd_flops,
           time_call([&] { kernels::conv3x3_forward_serial(x.data(), w.data(), b.data(), y.data(),
                                                           batch, ic, oc, hw, hw); }, reps),
           time_call([&] { kernels::conv3x3_forward(x.data(), w.data(), b.data(), y.data(), batch,
                                                    ic, oc, hw, hw); }, reps));
    report("conv bwd input", fwd_flops,
           time_call([&] { kernels::conv3x3_backward_input_serial(g.data(), w.data(), dx.data(),
                                                                  batch, ic, oc, hw, hw); }, reps),
           time_call([&] { kernels::conv3x3_backward_input(g.data(), w.data(), dx.data(), batch,
                                                           ic, oc, hw, hw); }, reps));
    report("conv bwd params", fwd_flops,
           time_call([&] { kernels::conv3x3_backward_params_serial(x.data(), g.data(), dw.data(),
                                                                   db.data(), batch, ic, oc, hw,
                                                                   hw); }, reps),
           time_call([&] { kernels::conv3x3_backward_params(x.data(), g.data(), dw.data(),
                                                            db.data(), batch, ic, oc, hw, hw); },
                     reps));
  }

  {  // dense 32768->84, the first FC layer
    const std::size_t in = 32 * map, out = 84;
    const auto x = random_vec(batch * in, rng);
    const auto w = random_vec(in * out, rng);
    const auto b = random_vec(out, rng);
    const auto g = random_vec(batch * out, rng);
    std::vector<double> y(batch * out), dx(batch * in), dw(in * out), db(out);
    const double flops = 2.0 * batch * in * out;

    report("dense fwd", flops,
           time_call([&] { kernels::dense_forward_serial(x.data(), w.data(), b.data(), y.data(),
                                                         batch, in, out); }, reps),
           time_call([&] { kernels::dense_forward(x.data(), w.data(), b.data(), y.data(), batch,
                                                  in, out); }, reps));
    report("dense bwd input", flops,
           time_call([&] { kernels::dense_backward_input_serial(g.data(), w.data(), dx.data(),
                                                                batch, in, out); }, reps),
           time_call([&] { kernels::dense_backward_input(g.data(), w.data(), dx.data(), batch, in,
                                                         out); }, reps));
    report("dense bwd params", flops,
           time_call([&] { kernels::dense_backward_params_serial(x.data(), g.data(), dw.data(),
                                                                 db.data(), batch, in, out); },
                     reps),
           time_call([&] { kernels::dense_backward_params(x.data(), g.data(), dw.data(), db.data(),
                                                          batch, in, out); }, reps));
  }
  return 0;
}
