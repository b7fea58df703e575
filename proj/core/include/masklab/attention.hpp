// Naive O(n^2) multi-head attention on the autograd tape. This is the
// reference path: the streamed kernel, the decode path, and the probes all
// get checked against it.
#pragma once

#include <vector>

#include "masklab/masking.hpp"
#include "masklab/position.hpp"
#include "masklab/tensor.hpp"

namespace masklab {

// Per-head projections; no biases anywhere in the stack.
struct HeadWeights {
  Tensor wq, wk, wv;  // model_dim x head_dim
  Tensor wo;          // head_dim x model_dim
};

struct MhaWeights {
  std::vector<HeadWeights> heads;

  int head_count() const { return static_cast<int>(heads.size()); }
  int head_dim() const;
  int model_dim() const;
};

// Detached per-head snapshot taken during a forward pass.
struct AttnHeadTrace {
  int layer = 0;
  int head = 0;
  Tensor attn;                // n x n f64, post-softmax, remasked
  std::vector<double> alpha;  // per-row mask ratio
};

struct AttnTrace {
  std::vector<AttnHeadTrace> heads;
};

// Full attention block: projections, position encoding, masked softmax,
// value mix, output projection summed over heads. x is n x model_dim;
// positions are the absolute 0-based token positions (normally 0..n-1).
//
// kind == vanilla uses the -inf reduction; stablemask in train mode uses
// the full P matrix at the current length, while infer/extrapolate modes
// append the per-row collapsed tau slot instead.
Tensor mha_forward(Graph& g, const Tensor& x, const MhaWeights& w,
                   MaskKind kind, const MaskSpec& spec, const PEConfig& pe,
                   const std::vector<int>& positions, int layer_index = 0,
                   AttnTrace* trace = nullptr);

}  // namespace masklab
