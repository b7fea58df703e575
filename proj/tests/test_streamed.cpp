#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "masklab/rng.hpp"
#include "masklab/streamed.hpp"

using namespace masklab;

namespace {

Tensor random_matrix(int n, int d, std::mt19937_64& rng, Dtype dt = Dtype::f64) {
  Tensor t = Tensor::zeros({n, d}, dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, normal(rng));
  return t;
}

double max_abs_diff(const StreamedResult& a, const StreamedResult& b) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.o.numel(); ++i)
    worst = std::max(worst, std::abs(a.o.at(i) - b.o.at(i)));
  for (std::size_t i = 0; i < a.lse.size(); ++i)
    worst = std::max(worst, std::abs(a.lse[i] - b.lse[i]));
  return worst;
}

}  // namespace

TEST_CASE("streamed output and lse match the naive oracle across tilings") {
  std::mt19937_64 rng(211);
  const int dh = 8;
  const double scale = 1.0 / std::sqrt(8.0);
  for (int n : {1, 2, 3, 7, 16, 33}) {
    Tensor q = random_matrix(n, dh, rng);
    Tensor k = random_matrix(n, dh, rng);
    Tensor v = random_matrix(n, dh, rng);
    for (MaskKind kind : {MaskKind::stablemask, MaskKind::vanilla}) {
      auto naive = naive_head_attention(q, k, v, kind, 0.5, scale);
      for (BlockPlan plan : {BlockPlan{1, 1}, BlockPlan{2, 3}, BlockPlan{8, 8},
                             BlockPlan{16, 16}, BlockPlan{5, 7},
                             BlockPlan{64, 64}}) {
        auto fast = streamed_attention(q, k, v, kind, 0.5, scale, plan);
        CAPTURE(n);
        CAPTURE(plan.br);
        CAPTURE(plan.bc);
        CAPTURE(mask_kind_name(kind));
        CHECK(max_abs_diff(naive, fast) < 1e-12);
      }
    }
  }
}

TEST_CASE("row maxima never decrease and sums go positive after the first tile") {
  std::mt19937_64 rng(223);
  const int n = 24, dh = 4;
  Tensor q = random_matrix(n, dh, rng);
  Tensor k = random_matrix(n, dh, rng);
  Tensor v = random_matrix(n, dh, rng);
  for (MaskKind kind : {MaskKind::stablemask, MaskKind::vanilla}) {
    std::vector<std::vector<double>> last_m;
    auto observer = [&](int ib, int jb, const RowState& st) {
      if (static_cast<int>(last_m.size()) <= ib) last_m.resize(ib + 1);
      auto& prev = last_m[static_cast<std::size_t>(ib)];
      if (!prev.empty())
        for (std::size_t r = 0; r < st.m.size(); ++r)
          CHECK(st.m[r] >= prev[r]);
      prev = st.m;
      // The first column tile always contains the (real) column 0, so
      // every row has positive mass from the start of the scan.
      if (jb >= 0)
        for (double l : st.l) CHECK(l > 0.0);
    };
    auto r = streamed_attention(q, k, v, kind, 0.5, 0.35, BlockPlan{5, 6},
                                observer, 1);
    for (double l : r.lse) CHECK(std::isfinite(l));
  }
}

TEST_CASE("thread count does not change a single bit of the result") {
  std::mt19937_64 rng(227);
  const int n = 40, dh = 8;
  Tensor q = random_matrix(n, dh, rng);
  Tensor k = random_matrix(n, dh, rng);
  Tensor v = random_matrix(n, dh, rng);
  auto base = streamed_attention(q, k, v, MaskKind::stablemask, 0.5, 0.3,
                                 BlockPlan{8, 8});
  for (int threads : {2, 4, 8}) {
    auto r = streamed_attention(q, k, v, MaskKind::stablemask, 0.5, 0.3,
                                BlockPlan{8, 8}, nullptr, threads);
    for (std::int64_t i = 0; i < base.o.numel(); ++i)
      CHECK(r.o.at(i) == base.o.at(i));
    for (std::size_t i = 0; i < base.lse.size(); ++i)
      CHECK(r.lse[i] == base.lse[i]);
  }
}

TEST_CASE("f32 inputs accumulate in f64 and land near the f64 result") {
  std::mt19937_64 rng(229);
  const int n = 12, dh = 8;
  Tensor q = random_matrix(n, dh, rng);
  Tensor k = random_matrix(n, dh, rng);
  Tensor v = random_matrix(n, dh, rng);
  Tensor q32 = Tensor::from_values(q.shape(), q.values(), Dtype::f32);
  Tensor k32 = Tensor::from_values(k.shape(), k.values(), Dtype::f32);
  Tensor v32 = Tensor::from_values(v.shape(), v.values(), Dtype::f32);
  auto a = streamed_attention(q, k, v, MaskKind::stablemask, 0.5, 0.3,
                              BlockPlan{4, 4});
  auto b = streamed_attention(q32, k32, v32, MaskKind::stablemask, 0.5, 0.3,
                              BlockPlan{4, 4});
  CHECK(b.o.dtype() == Dtype::f64);
  for (std::int64_t i = 0; i < a.o.numel(); ++i)
    CHECK(std::abs(a.o.at(i) - b.o.at(i)) < 1e-4);
}

TEST_CASE("bad plans, shapes, and gammas are rejected") {
  Tensor q = Tensor::zeros({4, 4});
  CHECK_THROWS_AS(
      streamed_attention(q, q, Tensor::zeros({3, 4}), MaskKind::vanilla, 0.5,
                         1.0, BlockPlan{8, 8}),
      std::invalid_argument);
  CHECK_THROWS_AS(
      streamed_attention(q, q, q, MaskKind::vanilla, 0.5, 1.0, BlockPlan{0, 8}),
      std::invalid_argument);
  CHECK_THROWS_AS(
      streamed_attention(q, q, q, MaskKind::stablemask, -0.5, 1.0,
                         BlockPlan{8, 8}),
      std::invalid_argument);
  auto observer = [](int, int, const RowState&) {};
  CHECK_THROWS_AS(
      streamed_attention(q, q, q, MaskKind::vanilla, 0.5, 1.0, BlockPlan{2, 2},
                         observer, 4),
      std::invalid_argument);
}

TEST_CASE("alpha shows up directly in the streamed row sums") {
  // O rows of the stablemask path sum value-mass alpha_i < 1; check via a
  // constant value matrix where each output row must equal alpha_i.
  const int n = 8, dh = 2;
  Tensor q = Tensor::zeros({n, dh});
  Tensor k = Tensor::zeros({n, dh});
  Tensor v = Tensor::full({n, dh}, 1.0);
  auto r = streamed_attention(q, k, v, MaskKind::stablemask, 0.5, 1.0,
                              BlockPlan{3, 3});
  for (int i = 1; i <= n; ++i)
    CHECK(std::abs(r.o.at(static_cast<std::int64_t>(i - 1) * dh) -
                   xi_position(i, n, 0.5)) < 1e-14);
}
