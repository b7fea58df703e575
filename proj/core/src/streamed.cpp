#include "masklab/streamed.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>

namespace masklab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Pseudo score for 0-based (i, j); 0 on and below the diagonal.
double pseudo_entry(MaskKind kind, double gamma, int i, int j) {
  if (j <= i) return 0.0;
  return kind == MaskKind::vanilla ? kNegInf
                                   : -static_cast<double>(j) * gamma;
}

}  // namespace

void BlockPlan::validate() const {
  check(br >= 1 && bc >= 1, "BlockPlan: block sizes must be >= 1");
}

int BlockPlan::row_tiles(int n) const { return (n + br - 1) / br; }
int BlockPlan::col_tiles(int n) const { return (n + bc - 1) / bc; }

StreamedResult streamed_attention(const Tensor& q, const Tensor& k,
                                  const Tensor& v, MaskKind kind, double gamma,
                                  double scale, const BlockPlan& plan,
                                  const StreamObserver& observer,
                                  int n_threads) {
  plan.validate();
  check(q.defined() && q.rank() == 2, "streamed_attention: q must be rank-2");
  const int n = q.dim(0), dh = q.dim(1);
  check(k.rank() == 2 && k.dim(0) == n && k.dim(1) == dh,
        "streamed_attention: k shape mismatch");
  check(v.rank() == 2 && v.dim(0) == n && v.dim(1) == dh,
        "streamed_attention: v shape mismatch");
  if (kind == MaskKind::stablemask)
    check(std::isfinite(gamma) && gamma > 0.0,
          "streamed_attention: gamma must be > 0");
  check(n_threads >= 1, "streamed_attention: n_threads must be >= 1");
  check(observer == nullptr || n_threads == 1,
        "streamed_attention: observer needs n_threads == 1");

  const std::vector<double> qv = q.values();
  const std::vector<double> kv = k.values();
  const std::vector<double> vv = v.values();

  StreamedResult out;
  out.o = Tensor::zeros({n, dh});
  out.lse.assign(static_cast<std::size_t>(n), 0.0);
  auto& ov = out.o.raw_f64();

  const int tr = plan.row_tiles(n);
  const int tc = plan.col_tiles(n);

  auto run_row_block = [&](int ib) {
    const int i0 = ib * plan.br;
    const int rows = std::min(plan.br, n - i0);

    RowState st;
    st.m.assign(static_cast<std::size_t>(rows), kNegInf);
    st.l.assign(static_cast<std::size_t>(rows), 0.0);
    std::vector<double> acc(static_cast<std::size_t>(rows) * dh, 0.0);
    std::vector<double> tile(static_cast<std::size_t>(rows) * plan.bc);

    for (int jb = 0; jb < tc; ++jb) {
      const int j0 = jb * plan.bc;
      const int cols = std::min(plan.bc, n - j0);

      // D = S (.) C + P for this tile, computed on the fly.
      for (int r = 0; r < rows; ++r) {
        const int i = i0 + r;
        for (int c = 0; c < cols; ++c) {
          const int j = j0 + c;
          double e;
          if (j <= i) {
            double s = 0.0;
            for (int x = 0; x < dh; ++x)
              s += qv[static_cast<std::size_t>(i) * dh + x] *
                   kv[static_cast<std::size_t>(j) * dh + x];
            e = s * scale;
            if (std::isnan(e))
              throw std::invalid_argument(
                  "streamed_attention: NaN score at (" + std::to_string(i) +
                  "," + std::to_string(j) + ")");
          } else {
            e = pseudo_entry(kind, gamma, i, j);
          }
          tile[static_cast<std::size_t>(r) * plan.bc + c] = e;
        }
      }

      for (int r = 0; r < rows; ++r) {
        const int i = i0 + r;
        double tile_max = kNegInf;
        for (int c = 0; c < cols; ++c)
          tile_max = std::max(tile_max,
                              tile[static_cast<std::size_t>(r) * plan.bc + c]);
        const double m_prev = st.m[static_cast<std::size_t>(r)];
        const double m_new = std::max(m_prev, tile_max);
        const double corr =
            (m_prev == m_new) ? 1.0 : std::exp(m_prev - m_new);

        double row_sum = 0.0;
        // Fold this tile in: l counts every column (pseudo ones included),
        // the value accumulation is remasked to the causal part.
        st.l[static_cast<std::size_t>(r)] *= corr;
        if (corr != 1.0)
          for (int x = 0; x < dh; ++x)
            acc[static_cast<std::size_t>(r) * dh + x] *= corr;
        for (int c = 0; c < cols; ++c) {
          const int j = j0 + c;
          const double d = tile[static_cast<std::size_t>(r) * plan.bc + c];
          const double p = (d == kNegInf) ? 0.0 : std::exp(d - m_new);
          row_sum += p;
          if (j <= i && p != 0.0)
            for (int x = 0; x < dh; ++x)
              acc[static_cast<std::size_t>(r) * dh + x] +=
                  p * vv[static_cast<std::size_t>(j) * dh + x];
        }
        st.l[static_cast<std::size_t>(r)] += row_sum;
        st.m[static_cast<std::size_t>(r)] = m_new;
      }

      if (observer) observer(ib, jb, st);
    }

    for (int r = 0; r < rows; ++r) {
      const int i = i0 + r;
      const double l = st.l[static_cast<std::size_t>(r)];
      for (int x = 0; x < dh; ++x)
        ov[static_cast<std::size_t>(i) * dh + x] =
            acc[static_cast<std::size_t>(r) * dh + x] / l;
      out.lse[static_cast<std::size_t>(i)] =
          st.m[static_cast<std::size_t>(r)] + std::log(l);
    }
  };

  if (n_threads == 1 || tr == 1) {
    for (int ib = 0; ib < tr; ++ib) run_row_block(ib);
  } else {
    // Row blocks touch disjoint output rows, so a shared cursor is enough.
    std::atomic<int> cursor{0};
    const int workers = std::min(n_threads, tr);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          const int ib = cursor.fetch_add(1);
          if (ib >= tr) break;
          run_row_block(ib);
        }
      });
    for (auto& t : pool) t.join();
  }
  return out;
}

StreamedResult naive_head_attention(const Tensor& q, const Tensor& k,
                                    const Tensor& v, MaskKind kind,
                                    double gamma, double scale) {
  const int n = q.dim(0), dh = q.dim(1);
  const std::vector<double> qv = q.values();
  const std::vector<double> kv = k.values();
  const std::vector<double> vv = v.values();

  Tensor scores = Tensor::zeros({n, n});
  auto& sv = scores.raw_f64();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int x = 0; x < dh; ++x)
        s += qv[static_cast<std::size_t>(i) * dh + x] *
             kv[static_cast<std::size_t>(j) * dh + x];
      sv[static_cast<std::size_t>(i) * n + j] = s * scale;
    }

  const MaskPair masks = kind == MaskKind::vanilla ? build_vanilla_masks(n)
                                                   : build_masks(n, gamma);
  const StableMaskResult sm = apply_stablemask(scores, masks);

  StreamedResult out;
  out.o = Tensor::zeros({n, dh});
  out.lse.assign(static_cast<std::size_t>(n), 0.0);
  auto& ov = out.o.raw_f64();
  const auto& av = sm.attn.raw_f64();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      const double w = av[static_cast<std::size_t>(i) * n + j];
      for (int x = 0; x < dh; ++x)
        ov[static_cast<std::size_t>(i) * dh + x] +=
            w * vv[static_cast<std::size_t>(j) * dh + x];
    }

  // Masked-row logsumexp, pseudo entries included.
  const auto& cv = masks.c.raw_f64();
  const auto& pv = masks.p.raw_f64();
  std::vector<double> row(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j)
      row[static_cast<std::size_t>(j)] =
          sv[static_cast<std::size_t>(i) * n + j] *
              cv[static_cast<std::size_t>(i) * n + j] +
          pv[static_cast<std::size_t>(i) * n + j];
    out.lse[static_cast<std::size_t>(i)] = logsumexp(row.data(), n);
  }
  return out;
}

}  // namespace masklab
