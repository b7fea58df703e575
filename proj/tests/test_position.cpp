#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "masklab/position.hpp"
#include "masklab/rng.hpp"
#include "masklab/tensor.hpp"

using namespace masklab;

TEST_CASE("rope pair 0 at position 1 rotates by exactly one radian") {
  auto angles = rope_angles({1}, 2, 10000.0);
  REQUIRE(angles.size() == 1);
  CHECK(angles[0] == 1.0);
}

TEST_CASE("rope angles scale with position and decay across pairs") {
  auto angles = rope_angles({0, 1, 2}, 4, 10000.0);
  REQUIRE(angles.size() == 6);
  CHECK(angles[0] == 0.0);
  CHECK(angles[1] == 0.0);
  CHECK(angles[2] == 1.0);
  CHECK(std::abs(angles[3] - std::pow(10000.0, -0.5)) < 1e-15);
  CHECK(angles[4] == 2.0);
  CHECK(std::abs(angles[5] - 2.0 * std::pow(10000.0, -0.5)) < 1e-15);
  CHECK_THROWS_AS(rope_angles({0}, 3, 10000.0), std::invalid_argument);
  CHECK_THROWS_AS(rope_angles({-1}, 2, 10000.0), std::invalid_argument);
}

TEST_CASE("rotation preserves norms and the q.k dot depends only on distance") {
  std::mt19937_64 rng(3);
  Graph g(Graph::Mode::no_grad);
  const int dim = 8;
  Tensor q = Tensor::zeros({1, dim});
  Tensor k = Tensor::zeros({1, dim});
  for (int i = 0; i < dim; ++i) {
    q.set(i, 2.0 * uniform01(rng) - 1.0);
    k.set(i, 2.0 * uniform01(rng) - 1.0);
  }
  auto dot_at = [&](int pq, int pk) {
    Tensor rq = g.pairwise_rotate(q, rope_angles({pq}, dim, 10000.0));
    Tensor rk = g.pairwise_rotate(k, rope_angles({pk}, dim, 10000.0));
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += rq.at(i) * rk.at(i);
    return s;
  };
  // Relative property: shifting both positions by the same offset keeps
  // the score.
  CHECK(std::abs(dot_at(3, 1) - dot_at(10, 8)) < 1e-9);
  CHECK(std::abs(dot_at(5, 5) - dot_at(0, 0)) < 1e-9);

  Tensor rq = g.pairwise_rotate(q, rope_angles({17}, dim, 10000.0));
  double n0 = 0.0, n1 = 0.0;
  for (int i = 0; i < dim; ++i) {
    n0 += q.at(i) * q.at(i);
    n1 += rq.at(i) * rq.at(i);
  }
  CHECK(std::abs(n0 - n1) < 1e-12);
}

TEST_CASE("alibi slopes for 8 heads are the classic powers of two") {
  auto slopes = alibi_slopes(8);
  REQUIRE(slopes.size() == 8);
  for (int h = 0; h < 8; ++h)
    CHECK(std::abs(slopes[h] - std::pow(2.0, -(h + 1))) < 1e-15);
  CHECK_THROWS_AS(alibi_slopes(0), std::invalid_argument);
}

TEST_CASE("alibi bias is -slope times distance on visible entries") {
  Tensor b = alibi_bias({0, 1, 2}, {0, 1, 2}, 0.25);
  const double want[9] = {0, 0, 0, -0.25, 0, 0, -0.5, -0.25, 0};
  for (int i = 0; i < 9; ++i) CHECK(b.at(i) == want[i]);
  // Decode-shaped call: one query row against absolute key positions.
  Tensor row = alibi_bias({5}, {2, 3, 4, 5}, 0.5);
  CHECK(row.at(0) == -1.5);
  CHECK(row.at(3) == 0.0);
}

TEST_CASE("sinusoidal table starts at [0,1,...] and matches sin/cos") {
  Tensor t = sinusoidal_table(3, 4, 10000.0);
  CHECK(t.at(0) == 0.0);
  CHECK(t.at(1) == 1.0);
  CHECK(t.at(2) == 0.0);
  CHECK(t.at(3) == 1.0);
  CHECK(std::abs(t.at(4) - std::sin(1.0)) < 1e-15);
  CHECK(std::abs(t.at(5) - std::cos(1.0)) < 1e-15);
  CHECK(std::abs(t.at(6) - std::sin(std::pow(10000.0, -0.5))) < 1e-15);
  CHECK_THROWS_AS(sinusoidal_table(2, 3, 10000.0), std::invalid_argument);
}

TEST_CASE("pe kind names round-trip") {
  for (PEKind k : {PEKind::none, PEKind::rope, PEKind::alibi, PEKind::ape_sin,
                   PEKind::ape_learn})
    CHECK(pe_kind_from_name(pe_kind_name(k)) == k);
  CHECK_THROWS_AS(pe_kind_from_name("t5"), std::invalid_argument);
}
