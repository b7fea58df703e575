// Mask algebra for causal attention with pseudo scores.
//
// All row/column indices in formulas are 1-based to match the usual
// notation; storage is 0-based. For an n x n score matrix A:
//   C[i][j] = 1 if j <= i else 0              (causal, diagonal included)
//   P[i][j] = -(j-1)*gamma if j > i else 0    (pseudo scores, column-fixed)
//   A_sm    = A (.) C + P
//   A_tilde = softmax_rows(A_sm) (.) C        (remask)
//   alpha_i = sum_j A_tilde[i][j]             (mask ratio, in (0, 1])
// Replacing P's entries with -inf recovers plain causal attention.
#pragma once

#include <vector>

#include "masklab/tensor.hpp"

namespace masklab {

enum class MaskKind { vanilla, stablemask };
enum class MaskMode { train, infer, extrapolate };

const char* mask_kind_name(MaskKind k);
const char* mask_mode_name(MaskMode m);
MaskKind mask_kind_from_name(const std::string& name);
MaskMode mask_mode_from_name(const std::string& name);

// Per-head decay rates plus the trained context length N. mode picks how
// rows past the real prefix are treated:
//   train       n x n algebra, pseudo columns end at the current length
//   infer       per-row tau against the trained length N, needs n <= N
//   extrapolate like infer, rows beyond N get tau = -i*gamma
struct MaskSpec {
  std::vector<double> gamma_per_head;
  int max_train_len = 0;
  MaskMode mode = MaskMode::train;

  static MaskSpec uniform(int heads, double gamma, int max_train_len,
                          MaskMode mode = MaskMode::train);
  // Geometric schedule around gamma: head h of H gets
  // gamma * 2^(1 - 2h/(H-1)), spanning [gamma/2, 2*gamma]. H == 1 keeps
  // gamma itself.
  static MaskSpec headwise(int heads, double gamma, int max_train_len,
                           MaskMode mode = MaskMode::train);

  int heads() const { return static_cast<int>(gamma_per_head.size()); }
  double gamma(int head) const;
  void validate() const;
};

struct MaskPair {
  Tensor c;  // n x n, f64
  Tensor p;  // n x n, f64
};

// StableMask pair for an n x n attention. gamma must be > 0.
MaskPair build_masks(int n, double gamma);

// Same C, but P holds -inf above the diagonal: the vanilla reduction.
MaskPair build_vanilla_masks(int n);

struct StableMaskResult {
  Tensor attn;                // A_tilde, n x n f64
  std::vector<double> alpha;  // per-row mask ratio
};

// Reference (non-autograd) application of the mask pair to raw scores.
// A must be square f64 and match the mask size; NaN scores throw.
StableMaskResult apply_stablemask(const Tensor& a, const MaskPair& masks);

// Total pseudo mass seen by row i (1-based) of the length-n mask:
// sum_{k=i}^{n-1} e^{-k*gamma}. Zero when i == n.
double pseudo_suffix_mass(int i, int n, double gamma);

// Collapsed pseudo logit for decode position n (1-based) against trained
// length N: tau = ln(sum_{k=n}^{N-1} e^{-k*gamma}). Returns -inf when
// n == N, where the suffix is empty and the row is already fully real.
double tau_infer(int n, int N, double gamma);

// Beyond the trained length the suffix is gone; a single slot decaying
// with the absolute position keeps the signal alive.
double tau_extrapolate(int n, double gamma);

// tau for row i (1-based) of a full forward pass under the given mode.
// Returns -inf when the row carries no pseudo mass (including all rows
// in train mode against N == n).
double row_tau(int i, int n, const MaskSpec& spec, int head);

struct InferRow {
  std::vector<double> attn;  // weights over the n real positions
  double alpha = 0.0;        // 1 - weight assigned to the tau slot
};

// Builds one decode-time attention row: appends the collapsed tau slot to
// the real logits, softmaxes, and drops the slot. logits.size() must be n;
// n picks tau_infer for n <= N and tau_extrapolate past that.
InferRow build_infer_row(const std::vector<double>& logits, int n, int N,
                         double gamma);

// Recoverable absolute position: xi_i = i / (i + pseudo_suffix_mass).
// Equals alpha_i when every real score in row i is zero (the probe
// construction zeroes W_Q and W_K to force exactly that).
double xi_position(int i, int n, double gamma);

}  // namespace masklab
