#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "f64ref.hpp"
#include "spkv/ops.hpp"
#include "spkv/tensor.hpp"
#include "testutil.hpp"

using namespace spkv;
using testutil::grad_vs_fd;
using testutil::rand_tensor;
using testutil::to_f64;

namespace {
constexpr float kInf = std::numeric_limits<float>::infinity();

double dsum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }
}  // namespace

TEST_CASE("fd gradients: elementwise ops") {
  Rng rng{1001};
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = rand_tensor({3, 7}, rng);
    Tensor y = rand_tensor({3, 7}, rng);
    const std::vector<double> yd = to_f64(y);

    CHECK(grad_vs_fd([](Tensor& t) { return sum(mul(t, t)); }, x,
                     [](const std::vector<double>& v) {
                       double s = 0;
                       for (double d : v) s += d * d;
                       return s;
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(mul(t, y)); }, x,
                     [&](const std::vector<double>& v) {
                       double s = 0;
                       for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * yd[i];
                       return s;
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(add(t, y)); }, x,
                     [&](const std::vector<double>& v) { return dsum(v) + dsum(yd); }) < 1e-3);
    CHECK(grad_vs_fd([](Tensor& t) { return sum(sigmoid(t)); }, x,
                     [](const std::vector<double>& v) {
                       double s = 0;
                       for (double d : v) s += f64ref::sigmoid(d);
                       return s;
                     }) < 1e-3);
    CHECK(grad_vs_fd([](Tensor& t) { return sum(silu(t)); }, x,
                     [](const std::vector<double>& v) {
                       double s = 0;
                       for (double d : v) s += f64ref::silu(d);
                       return s;
                     }) < 1e-3);
    CHECK(grad_vs_fd([](Tensor& t) { return mean(scale(t, 3.0f)); }, x,
                     [](const std::vector<double>& v) {
                       return 3.0 * dsum(v) / static_cast<double>(v.size());
                     }) < 1e-3);
  }
  // log_eps needs inputs positive and away from the perturbation radius
  Rng rng2{77};
  Tensor pos = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < pos.numel(); ++i)
    pos.ptr()[i] = 0.2f + 0.7f * rng2.next_float();
  CHECK(grad_vs_fd([](Tensor& t) { return sum(log_eps(t)); }, pos,
                   [](const std::vector<double>& v) {
                     double s = 0;
                     for (double d : v) s += f64ref::log_eps(d);
                     return s;
                   }) < 1e-3);
}

TEST_CASE("fd gradients: matmul family, both arguments") {
  Rng rng{2002};
  for (int trial = 0; trial < 3; ++trial) {
    Tensor a = rand_tensor({4, 6}, rng);
    Tensor b = rand_tensor({6, 5}, rng);
    const auto ad = to_f64(a), bd = to_f64(b);

    CHECK(grad_vs_fd([&](Tensor& t) { return sum(matmul(t, b)); }, a,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nn(1, 4, 6, 5, v, bd, c);
                       return dsum(c);
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(matmul(a, t)); }, b,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nn(1, 4, 6, 5, ad, v, c);
                       return dsum(c);
                     }) < 1e-3);

    Tensor bt = rand_tensor({5, 6}, rng);
    const auto btd = to_f64(bt);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(matmul_nt(t, bt)); }, a,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nt(1, 4, 6, 5, v, btd, c);
                       return dsum(c);
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(matmul_nt(a, t)); }, bt,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nt(1, 4, 6, 5, ad, v, c);
                       return dsum(c);
                     }) < 1e-3);

    Tensor ba = rand_tensor({2, 3, 4}, rng);
    Tensor bb = rand_tensor({2, 4, 5}, rng);
    const auto bad = to_f64(ba), bbd = to_f64(bb);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(bmm_nn(t, bb)); }, ba,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nn(2, 3, 4, 5, v, bbd, c);
                       return dsum(c);
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(bmm_nn(ba, t)); }, bb,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nn(2, 3, 4, 5, bad, v, c);
                       return dsum(c);
                     }) < 1e-3);

    Tensor bc = rand_tensor({2, 5, 4}, rng);
    const auto bcd = to_f64(bc);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(bmm_nt(t, bc)); }, ba,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nt(2, 3, 4, 5, v, bcd, c);
                       return dsum(c);
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(bmm_nt(ba, t)); }, bc,
                     [&](const std::vector<double>& v) {
                       std::vector<double> c;
                       f64ref::gemm_nt(2, 3, 4, 5, bad, v, c);
                       return dsum(c);
                     }) < 1e-3);
  }
}

TEST_CASE("matmul values match the f64 oracle") {
  Rng rng{555};
  Tensor a = rand_tensor({4, 5}, rng);
  Tensor b = rand_tensor({5, 3}, rng);
  Tensor c = matmul(a, b);
  std::vector<double> want;
  f64ref::gemm_nn(1, 4, 5, 3, to_f64(a), to_f64(b), want);
  for (std::size_t i = 0; i < c.numel(); ++i)
    CHECK(c.ptr()[i] == doctest::Approx(want[i]).epsilon(1e-5));
}

TEST_CASE("fd gradients: layout ops and rope") {
  Rng rng{3003};
  // reshape + mul with fixed weights exercises index bookkeeping
  Tensor x = rand_tensor({2, 3, 4, 6}, rng);
  Tensor w = rand_tensor({18, 8}, rng);
  const auto wd = to_f64(w);
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return sum(mul(reshape(t, {18, 8}), w)); }, x,
            [&](const std::vector<double>& v) {
              double s = 0;
              for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * wd[i];
              return s;
            }) < 1e-3);

  Tensor m = rand_tensor({2, 4, 3, 6}, rng);
  const auto md = to_f64(m);
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return sum(mul(permute_0213(t), m)); }, x,
            [&](const std::vector<double>& v) {
              // mirror the permutation [A,B,C,D] -> [A,C,B,D]
              double s = 0;
              const int A = 2, B = 3, C = 4, D = 6;
              for (int a = 0; a < A; ++a)
                for (int b = 0; b < B; ++b)
                  for (int c = 0; c < C; ++c)
                    for (int d = 0; d < D; ++d)
                      s += v[((static_cast<std::size_t>(a) * B + b) * C + c) * D + d] *
                           md[((static_cast<std::size_t>(a) * C + c) * B + b) * D + d];
              return s;
            }) < 1e-3);

  Tensor tl = rand_tensor({3, 4, 5}, rng);
  Tensor tm = rand_tensor({3, 5, 4}, rng);
  const auto tmd = to_f64(tm);
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return sum(mul(transpose_last2(t), tm)); }, tl,
            [&](const std::vector<double>& v) {
              double s = 0;
              for (int g = 0; g < 3; ++g)
                for (int i = 0; i < 4; ++i)
                  for (int j = 0; j < 5; ++j)
                    s += v[(static_cast<std::size_t>(g) * 4 + i) * 5 + j] *
                         tmd[(static_cast<std::size_t>(g) * 5 + j) * 4 + i];
              return s;
            }) < 1e-3);

  Tensor q = rand_tensor({2, 2, 5, 8}, rng);
  Tensor qm = rand_tensor({2, 2, 5, 8}, rng);
  const auto qmd = to_f64(qm);
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return sum(mul(rope(t, 10000.0f, 3), qm)); }, q,
            [&](const std::vector<double>& v) {
              std::vector<double> r;
              f64ref::rope(4, 5, 8, 10000.0, 3, v, r);
              double s = 0;
              for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * qmd[i];
              return s;
            }) < 1e-3);
}

TEST_CASE("rope matches the f64 oracle, preserves norms, relative property") {
  Rng rng{4004};
  Tensor x = rand_tensor({1, 2, 4, 8}, rng);
  Tensor y = rope(x, 10000.0f, 0);
  std::vector<double> want;
  f64ref::rope(2, 4, 8, 10000.0, 0, to_f64(x), want);
  for (std::size_t i = 0; i < y.numel(); ++i)
    CHECK(y.ptr()[i] == doctest::Approx(want[i]).epsilon(1e-4));
  // position 0 is the identity rotation
  for (int h = 0; h < 2; ++h)
    for (int d = 0; d < 8; ++d) {
      const std::size_t idx = (static_cast<std::size_t>(h) * 4 + 0) * 8 + d;
      CHECK(y.ptr()[idx] == doctest::Approx(x.ptr()[idx]));
    }
  // shifting both positions by the same offset preserves dot products
  Tensor a = rand_tensor({1, 1, 1, 8}, rng);
  Tensor b = rand_tensor({1, 1, 1, 8}, rng);
  auto dot_at = [&](int pa, int pb) {
    Tensor ra = rope(a, 10000.0f, pa);
    Tensor rb = rope(b, 10000.0f, pb);
    float acc = 0;
    for (int d = 0; d < 8; ++d) acc += ra.ptr()[d] * rb.ptr()[d];
    return acc;
  };
  CHECK(dot_at(3, 7) == doctest::Approx(dot_at(10, 14)).epsilon(1e-3));
}

TEST_CASE("fd gradients: rmsnorm wrt x and w") {
  Rng rng{5005};
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = rand_tensor({5, 9}, rng);
    Tensor w = rand_tensor({9}, rng);
    Tensor g = rand_tensor({5, 9}, rng);
    const auto xd = to_f64(x), wd = to_f64(w), gd = to_f64(g);
    auto project = [&](const std::vector<double>& y) {
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * gd[i];
      return s;
    };
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(mul(rmsnorm(t, w), g)); }, x,
                     [&](const std::vector<double>& v) {
                       std::vector<double> y;
                       f64ref::rmsnorm(5, 9, v, wd, 1e-5, y);
                       return project(y);
                     }) < 1e-3);
    CHECK(grad_vs_fd([&](Tensor& t) { return sum(mul(rmsnorm(x, t), g)); }, w,
                     [&](const std::vector<double>& v) {
                       std::vector<double> y;
                       f64ref::rmsnorm(5, 9, xd, v, 1e-5, y);
                       return project(y);
                     }) < 1e-3);
  }
}

TEST_CASE("fd gradients: add_rowvec both args") {
  Rng rng{6006};
  Tensor x = rand_tensor({7, 5}, rng);
  Tensor b = rand_tensor({5}, rng);
  Tensor g = rand_tensor({7, 5}, rng);
  const auto gd = to_f64(g), xd = to_f64(x), bd = to_f64(b);
  CHECK(grad_vs_fd([&](Tensor& t) { return sum(mul(add_rowvec(t, b), g)); }, x,
                   [&](const std::vector<double>& v) {
                     double s = 0;
                     for (int r = 0; r < 7; ++r)
                       for (int j = 0; j < 5; ++j)
                         s += (v[r * 5 + j] + bd[j]) * gd[r * 5 + j];
                     return s;
                   }) < 1e-3);
  CHECK(grad_vs_fd([&](Tensor& t) { return sum(mul(add_rowvec(x, t), g)); }, b,
                   [&](const std::vector<double>& v) {
                     double s = 0;
                     for (int r = 0; r < 7; ++r)
                       for (int j = 0; j < 5; ++j)
                         s += (xd[r * 5 + j] + v[j]) * gd[r * 5 + j];
                     return s;
                   }) < 1e-3);
}

TEST_CASE("embedding forward gathers rows, backward scatters with repeats") {
  Tensor table = Tensor::from_values({3, 2}, {1, 2, 3, 4, 5, 6});
  table.requires_grad = true;
  std::vector<int> ids = {2, 0, 2, 1};
  Tensor out = embedding(table, ids, 2, 2);
  CHECK(out.shape == std::vector<int>{2, 2, 2});
  CHECK(out.ptr()[0] == 5.0f);
  CHECK(out.ptr()[2] == 1.0f);
  Tensor loss = sum(out);
  backward(loss);
  // row 2 used twice -> grad 2 per element
  CHECK(table.grad_ptr()[0] == 1.0f);
  CHECK(table.grad_ptr()[2] == 1.0f);
  CHECK(table.grad_ptr()[4] == 2.0f);
  CHECK_THROWS_AS(embedding(table, {3}, 1, 1), std::runtime_error);
}

TEST_CASE("softmax_lastdim: probabilities, masking, gradient") {
  Rng rng{7007};
  Tensor x = rand_tensor({2, 3, 6}, rng);
  Tensor bias = Tensor::zeros({2, 3, 6});
  bias.ptr()[1] = -kInf;
  bias.ptr()[10] = -kInf;
  Tensor p = softmax_lastdim(x, bias);
  CHECK(p.ptr()[1] == 0.0f);
  CHECK(p.ptr()[10] == 0.0f);
  for (int r = 0; r < 6; ++r) {
    float s = 0;
    for (int j = 0; j < 6; ++j) s += p.ptr()[r * 6 + j];
    CHECK(s == doctest::Approx(1.0f).epsilon(1e-5));
  }

  Tensor g = rand_tensor({2, 3, 6}, rng);
  const auto gd = to_f64(g), biasd = to_f64(bias), xd = to_f64(x);
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return sum(mul(softmax_lastdim(t, bias), g)); }, x,
            [&](const std::vector<double>& v) {
              std::vector<double> pr;
              f64ref::softmax_bias(6, 6, v, biasd, pr);
              double s = 0;
              for (std::size_t i = 0; i < pr.size(); ++i) s += pr[i] * gd[i];
              return s;
            }) < 1e-3);

  // finite bias entries also get gradients
  Tensor bias2 = rand_tensor({2, 3, 6}, rng);
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return sum(mul(softmax_lastdim(x, t), g)); }, bias2,
            [&](const std::vector<double>& v) {
              std::vector<double> pr;
              f64ref::softmax_bias(6, 6, xd, v, pr);
              double s = 0;
              for (std::size_t i = 0; i < pr.size(); ++i) s += pr[i] * gd[i];
              return s;
            }) < 1e-3);

  // masked logits receive exactly zero gradient
  Tensor x2 = rand_tensor({1, 4}, rng);
  x2.requires_grad = true;
  Tensor b2 = Tensor::zeros({1, 4});
  b2.ptr()[2] = -kInf;
  Tensor out = softmax_lastdim(x2, b2);
  backward(sum(mul(out, out)));
  CHECK(x2.grad_ptr()[2] == 0.0f);

  Tensor all = Tensor::full({1, 4}, -kInf);
  CHECK_THROWS_AS(softmax_lastdim(x2, all), std::runtime_error);
}

TEST_CASE("cross_entropy_masked: value oracle and gradient") {
  Tensor logits = Tensor::from_values({2, 3}, {0.5f, -0.25f, 1.5f, 9.0f, 9.0f, 9.0f});
  std::vector<int> targets = {2, 0};
  std::vector<std::uint8_t> mask = {1, 0};
  Tensor loss = cross_entropy_masked(logits, targets, mask);
  const double z = std::exp(0.5) + std::exp(-0.25) + std::exp(1.5);
  CHECK(loss.item() == doctest::Approx(std::log(z) - 1.5).epsilon(1e-5));

  Rng rng{8008};
  Tensor l2 = rand_tensor({6, 7}, rng);
  std::vector<int> tg = {1, 4, 0, 6, 3, 2};
  std::vector<std::uint8_t> mk = {1, 0, 1, 1, 0, 1};
  CHECK(grad_vs_fd(
            [&](Tensor& t) { return cross_entropy_masked(t, tg, mk); }, l2,
            [&](const std::vector<double>& v) {
              return f64ref::cross_entropy_masked(6, 7, v, tg, mk);
            }) < 1e-3);

  // unmasked rows get exactly zero gradient
  l2.zero_grad();
  Tensor v = cross_entropy_masked(l2, tg, mk);
  backward(v);
  for (int j = 0; j < 7; ++j) {
    CHECK(l2.grad_ptr()[1 * 7 + j] == 0.0f);
    CHECK(l2.grad_ptr()[4 * 7 + j] == 0.0f);
  }
  std::vector<std::uint8_t> none(6, 0);
  CHECK_THROWS_AS(cross_entropy_masked(l2, tg, none), std::runtime_error);
}

TEST_CASE("composite mlp graph fd check across 20 seeds") {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    Rng rng{seed};
    Tensor x = rand_tensor({4, 6}, rng);
    Tensor w1 = rand_tensor({6, 8}, rng, 0.5f);
    Tensor b1 = rand_tensor({8}, rng, 0.1f);
    Tensor w2 = rand_tensor({8, 5}, rng, 0.5f);
    std::vector<int> tg = {0, 3, 1, 4};
    std::vector<std::uint8_t> mk = {1, 1, 0, 1};
    const auto xd = to_f64(x), b1d = to_f64(b1), w2d = to_f64(w2);
    CHECK(grad_vs_fd(
              [&](Tensor& w) {
                Tensor h = silu(add_rowvec(matmul(x, w), b1));
                return cross_entropy_masked(matmul(h, w2), tg, mk);
              },
              w1,
              [&](const std::vector<double>& w) {
                std::vector<double> h;
                f64ref::gemm_nn(1, 4, 6, 8, xd, w, h);
                for (int r = 0; r < 4; ++r)
                  for (int j = 0; j < 8; ++j)
                    h[r * 8 + j] = f64ref::silu(h[r * 8 + j] + b1d[j]);
                std::vector<double> lg;
                f64ref::gemm_nn(1, 4, 8, 5, h, w2d, lg);
                return f64ref::cross_entropy_masked(4, 5, lg, tg, mk);
              }) < 1e-3);
  }
}
