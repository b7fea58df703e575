#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "masklab/attention.hpp"
#include "masklab/rng.hpp"

using namespace masklab;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 0.5,
                     Dtype dt = Dtype::f64) {
  Tensor t = Tensor::zeros(shape, dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * normal(rng));
  return t;
}

MhaWeights random_mha(int d, int dh, int heads, std::mt19937_64& rng,
                      Dtype dt = Dtype::f64) {
  MhaWeights w;
  for (int h = 0; h < heads; ++h) {
    HeadWeights hw;
    hw.wq = random_tensor({d, dh}, rng, 0.3, dt);
    hw.wk = random_tensor({d, dh}, rng, 0.3, dt);
    hw.wv = random_tensor({d, dh}, rng, 0.3, dt);
    hw.wo = random_tensor({dh, d}, rng, 0.3, dt);
    w.heads.push_back(hw);
  }
  return w;
}

std::vector<int> iota_positions(int n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  return p;
}

}  // namespace

TEST_CASE("single-head attention matches the apply_stablemask oracle") {
  std::mt19937_64 rng(101);
  const int n = 6, d = 8, dh = 8;
  Tensor x = random_tensor({n, d}, rng);
  MhaWeights w = random_mha(d, dh, 1, rng);
  MaskSpec spec = MaskSpec::uniform(1, 0.5, 32, MaskMode::train);
  PEConfig pe;
  pe.kind = PEKind::none;

  Graph g(Graph::Mode::no_grad);
  AttnTrace trace;
  Tensor out = mha_forward(g, x, w, MaskKind::stablemask, spec, pe,
                           iota_positions(n), 0, &trace);

  // Oracle: raw projections, scaled scores, stablemask, value mix.
  Tensor q = g.matmul(x, w.heads[0].wq);
  Tensor k = g.matmul(x, w.heads[0].wk);
  Tensor v = g.matmul(x, w.heads[0].wv);
  Tensor scores = g.scale(g.matmul(q, g.transpose(k)),
                          1.0 / std::sqrt(static_cast<double>(dh)));
  auto sm = apply_stablemask(scores, build_masks(n, 0.5));
  Tensor mixed = g.matmul(sm.attn, v);
  Tensor want = g.matmul(mixed, w.heads[0].wo);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    CHECK(std::abs(out.at(i) - want.at(i)) < 1e-12);

  REQUIRE(trace.heads.size() == 1);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * n; ++i)
    CHECK(std::abs(trace.heads[0].attn.at(i) - sm.attn.at(i)) < 1e-12);
  for (int i = 0; i < n; ++i)
    CHECK(std::abs(trace.heads[0].alpha[i] - sm.alpha[i]) < 1e-12);
}

TEST_CASE("vanilla attention matches the -inf reduction oracle") {
  std::mt19937_64 rng(103);
  const int n = 5, d = 6, dh = 6;
  Tensor x = random_tensor({n, d}, rng);
  MhaWeights w = random_mha(d, dh, 1, rng);
  MaskSpec spec = MaskSpec::uniform(1, 0.5, 32, MaskMode::train);
  PEConfig pe;
  pe.kind = PEKind::none;

  Graph g(Graph::Mode::no_grad);
  AttnTrace trace;
  (void)mha_forward(g, x, w, MaskKind::vanilla, spec, pe, iota_positions(n), 0,
                    &trace);
  // Vanilla rows are plain causal softmax: alpha is identically one.
  for (int i = 0; i < n; ++i)
    CHECK(std::abs(trace.heads[0].alpha[i] - 1.0) < 1e-12);

  Tensor q = g.matmul(x, w.heads[0].wq);
  Tensor k = g.matmul(x, w.heads[0].wk);
  Tensor scores = g.scale(g.matmul(q, g.transpose(k)),
                          1.0 / std::sqrt(static_cast<double>(dh)));
  auto sm = apply_stablemask(scores, build_vanilla_masks(n));
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * n; ++i)
    CHECK(std::abs(trace.heads[0].attn.at(i) - sm.attn.at(i)) < 1e-12);
}

TEST_CASE("train mode at length N equals infer mode with per-row tau") {
  std::mt19937_64 rng(107);
  const int n = 10, d = 8, dh = 4, heads = 2;
  Tensor x = random_tensor({n, d}, rng);
  MhaWeights w = random_mha(d, dh, heads, rng);
  PEConfig pe;
  pe.kind = PEKind::rope;
  MaskSpec train = MaskSpec::uniform(heads, 0.5, n, MaskMode::train);
  MaskSpec infer = MaskSpec::uniform(heads, 0.5, n, MaskMode::infer);

  Graph g(Graph::Mode::no_grad);
  Tensor a = mha_forward(g, x, w, MaskKind::stablemask, train, pe,
                         iota_positions(n));
  Tensor b = mha_forward(g, x, w, MaskKind::stablemask, infer, pe,
                         iota_positions(n));
  for (std::int64_t i = 0; i < a.numel(); ++i)
    CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
}

TEST_CASE("gradients w.r.t. masked logits are exactly zero") {
  std::mt19937_64 rng(109);
  const int n = 5;
  Tensor scores = random_tensor({n, n}, rng, 1.0);
  scores.set_requires_grad(true);
  MaskPair mp = build_masks(n, 0.5);
  Graph g;
  Tensor masked = g.add(g.mul(scores, mp.c), mp.p);
  Tensor attn = g.mul(g.softmax_rows(masked), mp.c);
  Tensor weights = random_tensor({n, n}, rng, 1.0);
  g.backward(g.sum(g.mul(attn, weights)));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      CHECK(scores.grad_at(static_cast<std::int64_t>(i) * n + j) == 0.0);
  // And the visible region does receive gradient.
  double lower = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j)
      lower += std::abs(scores.grad_at(static_cast<std::int64_t>(i) * n + j));
  CHECK(lower > 0.0);
}

TEST_CASE("finite differences pass through the whole block") {
  std::mt19937_64 rng(113);
  const int n = 4, d = 8, dh = 4, heads = 2;
  Tensor x = random_tensor({n, d}, rng);
  MhaWeights w = random_mha(d, dh, heads, rng);
  Tensor mixw = random_tensor({n, d}, rng);

  std::vector<Tensor> leaves = {x};
  for (auto& hw : w.heads) {
    leaves.push_back(hw.wq);
    leaves.push_back(hw.wk);
    leaves.push_back(hw.wv);
    leaves.push_back(hw.wo);
  }
  for (auto& t : leaves) t.set_requires_grad(true);

  for (MaskKind kind : {MaskKind::stablemask, MaskKind::vanilla}) {
    for (PEKind pk : {PEKind::none, PEKind::rope, PEKind::alibi}) {
      MaskSpec spec = MaskSpec::uniform(heads, 0.5, 16, MaskMode::train);
      PEConfig pe;
      pe.kind = pk;
      auto build = [&](Graph& g) {
        Tensor out = mha_forward(g, x, w, kind, spec, pe, iota_positions(n));
        return g.sum(g.mul(out, mixw));
      };
      Graph g;
      Tensor loss = build(g);
      g.backward(loss);

      double worst = 0.0;
      const double h = 1e-5;
      for (auto& leaf : leaves) {
        for (std::int64_t i = 0; i < leaf.numel(); ++i) {
          const double x0 = leaf.at(i);
          leaf.set(i, x0 + h);
          Graph gp(Graph::Mode::no_grad);
          const double fp = build(gp).at(0);
          leaf.set(i, x0 - h);
          Graph gm(Graph::Mode::no_grad);
          const double fm = build(gm).at(0);
          leaf.set(i, x0);
          const double fd = (fp - fm) / (2.0 * h);
          const double ad = leaf.grad_at(i);
          worst = std::max(worst, std::abs(ad - fd) /
                                      std::max(1.0, std::abs(fd) + std::abs(ad)));
        }
        leaf.zero_grad();
      }
      CAPTURE(mask_kind_name(kind));
      CAPTURE(pe_kind_name(pk));
      CHECK(worst < 1e-5);
    }
  }
}

TEST_CASE("zero q/k projections surface alpha = xi in the trace") {
  std::mt19937_64 rng(127);
  const int n = 7, d = 6, dh = 6;
  Tensor x = random_tensor({n, d}, rng);
  MhaWeights w = random_mha(d, dh, 1, rng);
  w.heads[0].wq.fill(0.0);
  w.heads[0].wk.fill(0.0);
  MaskSpec spec = MaskSpec::uniform(1, 0.5, 32, MaskMode::train);
  PEConfig pe;
  pe.kind = PEKind::rope;

  Graph g(Graph::Mode::no_grad);
  AttnTrace trace;
  (void)mha_forward(g, x, w, MaskKind::stablemask, spec, pe, iota_positions(n),
                    3, &trace);
  REQUIRE(trace.heads.size() == 1);
  CHECK(trace.heads[0].layer == 3);
  for (int i = 1; i <= n; ++i)
    CHECK(std::abs(trace.heads[0].alpha[i - 1] - xi_position(i, n, 0.5)) <
          1e-12);
}

TEST_CASE("f32 attention stays near the f64 path") {
  std::mt19937_64 rng(131);
  const int n = 5, d = 8, dh = 4, heads = 2;
  Tensor x64 = random_tensor({n, d}, rng);
  MhaWeights w64 = random_mha(d, dh, heads, rng);
  Tensor x32 = Tensor::from_values(x64.shape(), x64.values(), Dtype::f32);
  MhaWeights w32;
  for (auto& hw : w64.heads) {
    HeadWeights h32;
    h32.wq = Tensor::from_values(hw.wq.shape(), hw.wq.values(), Dtype::f32);
    h32.wk = Tensor::from_values(hw.wk.shape(), hw.wk.values(), Dtype::f32);
    h32.wv = Tensor::from_values(hw.wv.shape(), hw.wv.values(), Dtype::f32);
    h32.wo = Tensor::from_values(hw.wo.shape(), hw.wo.values(), Dtype::f32);
    w32.heads.push_back(h32);
  }
  MaskSpec spec = MaskSpec::uniform(heads, 0.5, 16, MaskMode::train);
  PEConfig pe;
  pe.kind = PEKind::rope;
  Graph g(Graph::Mode::no_grad);
  Tensor a = mha_forward(g, x64, w64, MaskKind::stablemask, spec, pe,
                         iota_positions(n));
  Tensor b = mha_forward(g, x32, w32, MaskKind::stablemask, spec, pe,
                         iota_positions(n));
  CHECK(b.dtype() == Dtype::f32);
  for (std::int64_t i = 0; i < a.numel(); ++i)
    CHECK(std::abs(a.at(i) - b.at(i)) < 1e-3);
}

TEST_CASE("infer mode rejects sequences longer than the trained length") {
  std::mt19937_64 rng(137);
  const int n = 6, d = 4, dh = 4;
  Tensor x = random_tensor({n, d}, rng);
  MhaWeights w = random_mha(d, dh, 1, rng);
  MaskSpec spec = MaskSpec::uniform(1, 0.5, 4, MaskMode::infer);
  PEConfig pe;
  pe.kind = PEKind::none;
  Graph g(Graph::Mode::no_grad);
  CHECK_THROWS_AS(
      (void)mha_forward(g, x, w, MaskKind::stablemask, spec, pe,
                        iota_positions(n)),
      std::invalid_argument);
  // Extrapolate mode accepts the same length.
  spec.mode = MaskMode::extrapolate;
  Tensor out = mha_forward(g, x, w, MaskKind::stablemask, spec, pe,
                           iota_positions(n));
  for (std::int64_t i = 0; i < out.numel(); ++i)
    CHECK(std::isfinite(out.at(i)));
}
