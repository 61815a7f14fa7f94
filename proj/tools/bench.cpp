// Compares the serial reference kernels against the OpenMP versions and
// reports throughput. The two must agree bit-for-bit; this also serves as a
// quick sanity check outside the unit tests.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "spkv/kernels.hpp"
#include "spkv/tensor.hpp"

namespace {

double now_sec() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

void fill_random(std::vector<float>& v, spkv::Rng& rng) {
  for (float& x : v) x = rng.next_float() * 2.0f - 1.0f;
}

struct GemmCase {
  const char* name;
  int G, m, k, n;
};

void bench_gemm(const GemmCase& c, int reps) {
  spkv::Rng rng{42};
  std::vector<float> a(static_cast<std::size_t>(c.G) * c.m * c.k);
  std::vector<float> b(static_cast<std::size_t>(c.G) * c.k * c.n);
  std::vector<float> out_serial(static_cast<std::size_t>(c.G) * c.m * c.n);
  std::vector<float> out_omp(out_serial.size());
  fill_random(a, rng);
  fill_random(b, rng);

  double t0 = now_sec();
  for (int r = 0; r < reps; ++r)
    spkv::kernels::gemm_nn_serial(c.G, c.m, c.k, c.n, a.data(), b.data(),
                                  out_serial.data(), false);
  double serial_s = (now_sec() - t0) / reps;

  t0 = now_sec();
  for (int r = 0; r < reps; ++r)
    spkv::kernels::gemm_nn_omp(c.G, c.m, c.k, c.n, a.data(), b.data(),
                               out_omp.data(), false);
  double omp_s = (now_sec() - t0) / reps;

  const bool identical =
      std::memcmp(out_serial.data(), out_omp.data(),
                  out_serial.size() * sizeof(float)) == 0;
  const double flops = 2.0 * c.G * c.m * c.k * static_cast<double>(c.n);
  std::printf("%-28s serial %8.3f ms (%6.2f GFLOP/s)   omp %8.3f ms (%6.2f GFLOP/s)   speedup %.2fx   bitwise %s\n",
              c.name, serial_s * 1e3, flops / serial_s * 1e-9, omp_s * 1e3,
              flops / omp_s * 1e-9, serial_s / omp_s,
              identical ? "equal" : "DIFFER");
}

void bench_softmax(int R, int n, int reps) {
  spkv::Rng rng{7};
  std::vector<float> x(static_cast<std::size_t>(R) * n), bias(x.size(), 0.0f);
  std::vector<float> p1(x.size()), p2(x.size());
  fill_random(x, rng);

  double t0 = now_sec();
  for (int r = 0; r < reps; ++r)
    spkv::kernels::softmax_rows_serial(R, n, x.data(), bias.data(), p1.data());
  double serial_s = (now_sec() - t0) / reps;
  t0 = now_sec();
  for (int r = 0; r < reps; ++r)
    spkv::kernels::softmax_rows_omp(R, n, x.data(), bias.data(), p2.data());
  double omp_s = (now_sec() - t0) / reps;
  const bool identical = std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(float)) == 0;
  std::printf("softmax %dx%-6d             serial %8.3f ms                     omp %8.3f ms                     speedup %.2fx   bitwise %s\n",
              R, n, serial_s * 1e3, omp_s * 1e3, serial_s / omp_s,
              identical ? "equal" : "DIFFER");
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::stoi(argv[1]);

  std::printf("threads available: %d, parallel dispatch: %s\n",
              spkv::kernels::thread_count(),
              spkv::kernels::parallel_enabled() ? "on" : "off");

  const GemmCase cases[] = {
      {"gemm 256x128x128", 1, 256, 128, 128},
      {"gemm 1024x128x512", 1, 1024, 128, 512},
      {"gemm 1024x512x128", 1, 1024, 512, 128},
      {"gemm batched 32x81x16x81", 32, 81, 16, 81},
      {"gemm batched 32x81x81x16", 32, 81, 81, 16},
      {"gemm 648x128x384", 1, 648, 128, 384},
  };
  for (const auto& c : cases) bench_gemm(c, reps);
  bench_softmax(32 * 81, 81, reps);
  return 0;
}
