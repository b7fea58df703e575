#include "masklab/position.hpp"

#include <cmath>
#include <stdexcept>

namespace masklab {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

const char* pe_kind_name(PEKind k) {
  switch (k) {
    case PEKind::none: return "none";
    case PEKind::rope: return "rope";
    case PEKind::alibi: return "alibi";
    case PEKind::ape_sin: return "ape-sin";
    case PEKind::ape_learn: return "ape-learn";
  }
  return "?";
}

PEKind pe_kind_from_name(const std::string& name) {
  if (name == "none") return PEKind::none;
  if (name == "rope") return PEKind::rope;
  if (name == "alibi") return PEKind::alibi;
  if (name == "ape-sin") return PEKind::ape_sin;
  if (name == "ape-learn") return PEKind::ape_learn;
  throw std::invalid_argument("unknown position encoding '" + name + "'");
}

void PEConfig::validate() const {
  check(rope_base > 1.0, "PEConfig: rope_base must be > 1");
}

std::vector<double> rope_angles(const std::vector<int>& positions, int dim,
                                double base) {
  check(dim > 0 && dim % 2 == 0, "rope_angles: dim must be positive even");
  check(base > 1.0, "rope_angles: base must be > 1");
  const int half = dim / 2;
  std::vector<double> angles(positions.size() * static_cast<std::size_t>(half));
  for (std::size_t t = 0; t < positions.size(); ++t) {
    check(positions[t] >= 0, "rope_angles: negative position");
    for (int k = 0; k < half; ++k) {
      const double freq = std::pow(base, -2.0 * k / dim);
      angles[t * static_cast<std::size_t>(half) + static_cast<std::size_t>(k)] =
          positions[t] * freq;
    }
  }
  return angles;
}

std::vector<double> alibi_slopes(int heads) {
  check(heads >= 1, "alibi_slopes: heads must be >= 1");
  std::vector<double> slopes(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h)
    slopes[static_cast<std::size_t>(h)] =
        std::pow(2.0, -8.0 * (h + 1) / heads);
  return slopes;
}

Tensor alibi_bias(const std::vector<int>& qpos, const std::vector<int>& kpos,
                  double slope) {
  const int nq = static_cast<int>(qpos.size());
  const int nk = static_cast<int>(kpos.size());
  Tensor bias = Tensor::zeros({nq, nk});
  auto& b = bias.raw_f64();
  for (int i = 0; i < nq; ++i)
    for (int j = 0; j < nk; ++j)
      if (kpos[static_cast<std::size_t>(j)] <= qpos[static_cast<std::size_t>(i)])
        b[static_cast<std::size_t>(i) * nk + j] =
            -slope * (qpos[static_cast<std::size_t>(i)] -
                      kpos[static_cast<std::size_t>(j)]);
  return bias;
}

Tensor sinusoidal_table(int n, int dim, double base) {
  check(n >= 1, "sinusoidal_table: n must be >= 1");
  check(dim > 0 && dim % 2 == 0, "sinusoidal_table: dim must be positive even");
  Tensor table = Tensor::zeros({n, dim});
  auto& v = table.raw_f64();
  for (int t = 0; t < n; ++t)
    for (int k = 0; k < dim / 2; ++k) {
      const double angle = t * std::pow(base, -2.0 * k / dim);
      v[static_cast<std::size_t>(t) * dim + 2 * k] = std::sin(angle);
      v[static_cast<std::size_t>(t) * dim + 2 * k + 1] = std::cos(angle);
    }
  return table;
}

}  // namespace masklab
