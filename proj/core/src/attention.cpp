#include "masklab/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace masklab {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Tensor to_dtype(const Tensor& t, Dtype dt) {
  if (t.dtype() == dt) return t;
  return Tensor::from_values(t.shape(), t.values(), dt);
}

}  // namespace

int MhaWeights::head_dim() const {
  check(!heads.empty(), "MhaWeights: no heads");
  return heads.front().wq.dim(1);
}

int MhaWeights::model_dim() const {
  check(!heads.empty(), "MhaWeights: no heads");
  return heads.front().wq.dim(0);
}

Tensor mha_forward(Graph& g, const Tensor& x, const MhaWeights& w,
                   MaskKind kind, const MaskSpec& spec, const PEConfig& pe,
                   const std::vector<int>& positions, int layer_index,
                   AttnTrace* trace) {
  check(x.defined() && x.rank() == 2, "mha_forward: x must be rank-2");
  const int n = x.dim(0);
  const int d = x.dim(1);
  check(w.head_count() >= 1, "mha_forward: no heads");
  check(w.model_dim() == d, "mha_forward: model_dim mismatch");
  check(static_cast<int>(positions.size()) == n,
        "mha_forward: positions size mismatch");
  if (kind == MaskKind::stablemask) {
    spec.validate();
    check(w.head_count() == spec.heads(),
          "mha_forward: gamma count != head count");
    if (spec.mode == MaskMode::infer)
      check(n <= spec.max_train_len,
            "mha_forward: infer mode needs n <= max_train_len");
  }
  const int dh = w.head_dim();
  if (pe.kind == PEKind::rope)
    check(dh % 2 == 0, "mha_forward: rope needs an even head_dim");

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Dtype dt = x.dtype();

  // Mask constants shared across heads (mode-dependent P below).
  const MaskPair vmp = build_vanilla_masks(n);
  const Tensor causal = to_dtype(vmp.c, dt);
  const Tensor p_inf = to_dtype(vmp.p, dt);  // -inf above the diagonal

  std::vector<double> slopes;
  if (pe.kind == PEKind::alibi) slopes = alibi_slopes(w.head_count());

  Tensor out;
  for (int h = 0; h < w.head_count(); ++h) {
    const HeadWeights& hw = w.heads[static_cast<std::size_t>(h)];
    Tensor q = g.matmul(x, hw.wq);
    Tensor k = g.matmul(x, hw.wk);
    Tensor v = g.matmul(x, hw.wv);
    if (pe.kind == PEKind::rope) {
      const auto angles = rope_angles(positions, dh, pe.rope_base);
      q = g.pairwise_rotate(q, angles);
      k = g.pairwise_rotate(k, angles);
    }
    Tensor scores = g.scale(g.matmul(q, g.transpose(k)), scale);
    if (pe.kind == PEKind::alibi) {
      Tensor bias = to_dtype(
          alibi_bias(positions, positions, slopes[static_cast<std::size_t>(h)]),
          dt);
      scores = g.add(scores, bias);
    }

    Tensor attn;
    if (kind == MaskKind::vanilla) {
      Tensor masked = g.add(g.mul(scores, causal), p_inf);
      attn = g.mul(g.softmax_rows(masked), causal);
    } else if (spec.mode == MaskMode::train) {
      const Tensor p = to_dtype(build_masks(n, spec.gamma(h)).p, dt);
      Tensor masked = g.add(g.mul(scores, causal), p);
      attn = g.mul(g.softmax_rows(masked), causal);
    } else {
      // infer / extrapolate: no explicit pseudo columns, one tau slot.
      std::vector<double> tau_col(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i)
        tau_col[static_cast<std::size_t>(i)] = row_tau(i + 1, n, spec, h);
      Tensor masked = g.add(g.mul(scores, causal), p_inf);
      Tensor ext = g.append_col(masked, tau_col);
      Tensor probs = g.softmax_rows(ext);
      attn = g.mul(g.slice_cols(probs, 0, n), causal);
    }

    if (trace != nullptr) {
      AttnHeadTrace ht;
      ht.layer = layer_index;
      ht.head = h;
      ht.attn = Tensor::from_values({n, n}, attn.values());
      ht.alpha.assign(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j)
          s += ht.attn.at(static_cast<std::int64_t>(i) * n + j);
        ht.alpha[static_cast<std::size_t>(i)] = s;
      }
      trace->heads.push_back(std::move(ht));
    }

    Tensor mixed = g.matmul(attn, v);
    Tensor proj = g.matmul(mixed, hw.wo);
    out = out.defined() ? g.add(out, proj) : proj;
  }
  return out;
}

}  // namespace masklab
