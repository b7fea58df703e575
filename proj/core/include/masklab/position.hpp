// Position encodings used by the attention stack. Positions are 0-based
// everywhere: token t of a sequence sits at position t, and decode steps
// carry their absolute position even when a cache window drops old keys.
#pragma once

#include <string>
#include <vector>

#include "masklab/tensor.hpp"

namespace masklab {

enum class PEKind { none, rope, alibi, ape_sin, ape_learn };

const char* pe_kind_name(PEKind k);
PEKind pe_kind_from_name(const std::string& name);

struct PEConfig {
  PEKind kind = PEKind::rope;
  double rope_base = 10000.0;

  void validate() const;
};

// Rotation angles for Graph::pairwise_rotate: angle[t][k] =
// pos_t * base^(-2k/dim) for pair k of dim/2. dim must be even.
std::vector<double> rope_angles(const std::vector<int>& positions, int dim,
                                double base);

// Head h of H gets slope 2^(-8(h+1)/H); 8 heads yield 1/2 .. 1/256.
std::vector<double> alibi_slopes(int heads);

// Bias matrix -slope * (qpos_i - kpos_j) on causally visible entries
// (kpos <= qpos), zero elsewhere. Added to scores before masking.
Tensor alibi_bias(const std::vector<int>& qpos, const std::vector<int>& kpos,
                  double slope);

// Classic interleaved sin/cos table, n x dim:
// [t][2k] = sin(t / base^(2k/dim)), [t][2k+1] = cos(same).
Tensor sinusoidal_table(int n, int dim, double base);

}  // namespace masklab
