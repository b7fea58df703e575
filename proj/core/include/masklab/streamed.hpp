// Blocked single-head attention with an online softmax, the streaming
// counterpart of apply_stablemask. Tiles above the diagonal still run
// under stablemask (pseudo scores live there); only the post-softmax
// accumulation is remasked. All accumulation is f64 regardless of the
// input dtype.
#pragma once

#include <functional>
#include <vector>

#include "masklab/masking.hpp"
#include "masklab/tensor.hpp"

namespace masklab {

struct BlockPlan {
  int br = 16;
  int bc = 16;

  void validate() const;
  int row_tiles(int n) const;
  int col_tiles(int n) const;
};

struct StreamedResult {
  Tensor o;                 // n x head_dim, f64
  std::vector<double> lse;  // per-row log-sum-exp of the masked scores
};

// Running state for one row block, observable mid-scan: m is the running
// row max, l the running (rescaled) exp sum. m never decreases along the
// column scan and l is strictly positive once the diagonal tile has been
// folded in.
struct RowState {
  std::vector<double> m, l;
};

// Called after each column tile of each row block; only fires when
// n_threads == 1 since row blocks run concurrently otherwise.
using StreamObserver =
    std::function<void(int row_block, int col_block, const RowState&)>;

// q, k, v are n x head_dim (f64 or f32). scale multiplies q k^T before
// masking. kind == vanilla uses -inf pseudo entries; stablemask uses
// -j*gamma at 0-based column j above the diagonal.
StreamedResult streamed_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, MaskKind kind, double gamma,
                                  double scale, const BlockPlan& plan,
                                  const StreamObserver& observer = nullptr,
                                  int n_threads = 1);

// Unblocked oracle with identical semantics, built on apply_stablemask.
StreamedResult naive_head_attention(const Tensor& q, const Tensor& k,
                                    const Tensor& v, MaskKind kind,
                                    double gamma, double scale);

}  // namespace masklab
