#include "masklab/masking.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace masklab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

}  // namespace

const char* mask_kind_name(MaskKind k) {
  return k == MaskKind::vanilla ? "vanilla" : "stablemask";
}

const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::train: return "train";
    case MaskMode::infer: return "infer";
    case MaskMode::extrapolate: return "extrapolate";
  }
  return "?";
}

MaskKind mask_kind_from_name(const std::string& name) {
  if (name == "vanilla") return MaskKind::vanilla;
  if (name == "stablemask") return MaskKind::stablemask;
  fail("unknown mask kind '" + name + "'");
}

MaskMode mask_mode_from_name(const std::string& name) {
  if (name == "train") return MaskMode::train;
  if (name == "infer") return MaskMode::infer;
  if (name == "extrapolate") return MaskMode::extrapolate;
  fail("unknown mask mode '" + name + "'");
}

// ----- MaskSpec -----

MaskSpec MaskSpec::uniform(int heads, double gamma, int max_train_len,
                           MaskMode mode) {
  MaskSpec spec;
  spec.gamma_per_head.assign(static_cast<std::size_t>(heads), gamma);
  spec.max_train_len = max_train_len;
  spec.mode = mode;
  spec.validate();
  return spec;
}

MaskSpec MaskSpec::headwise(int heads, double gamma, int max_train_len,
                            MaskMode mode) {
  MaskSpec spec;
  spec.max_train_len = max_train_len;
  spec.mode = mode;
  spec.gamma_per_head.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const double e = heads == 1 ? 0.0 : 1.0 - 2.0 * h / (heads - 1);
    spec.gamma_per_head[static_cast<std::size_t>(h)] =
        gamma * std::pow(2.0, e);
  }
  spec.validate();
  return spec;
}

double MaskSpec::gamma(int head) const {
  check(head >= 0 && head < heads(), "MaskSpec: head index out of range");
  return gamma_per_head[static_cast<std::size_t>(head)];
}

void MaskSpec::validate() const {
  check(heads() >= 1, "MaskSpec: needs at least one head");
  for (double g : gamma_per_head)
    check(std::isfinite(g) && g > 0.0,
          "MaskSpec: gamma must be finite and > 0, got " + std::to_string(g));
  check(max_train_len >= 1, "MaskSpec: max_train_len must be >= 1");
}

// ----- mask construction -----

MaskPair build_masks(int n, double gamma) {
  check(n >= 1, "build_masks: n must be >= 1");
  check(std::isfinite(gamma) && gamma > 0.0,
        "build_masks: gamma must be finite and > 0");
  MaskPair mp;
  mp.c = Tensor::zeros({n, n});
  mp.p = Tensor::zeros({n, n});
  auto& c = mp.c.raw_f64();
  auto& p = mp.p.raw_f64();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j <= i)
        c[static_cast<std::size_t>(i) * n + j] = 1.0;
      else
        p[static_cast<std::size_t>(i) * n + j] = -static_cast<double>(j) * gamma;
    }
  return mp;
}

MaskPair build_vanilla_masks(int n) {
  check(n >= 1, "build_vanilla_masks: n must be >= 1");
  MaskPair mp;
  mp.c = Tensor::zeros({n, n});
  mp.p = Tensor::zeros({n, n});
  auto& c = mp.c.raw_f64();
  auto& p = mp.p.raw_f64();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j <= i)
        c[static_cast<std::size_t>(i) * n + j] = 1.0;
      else
        p[static_cast<std::size_t>(i) * n + j] = kNegInf;
    }
  return mp;
}

StableMaskResult apply_stablemask(const Tensor& a, const MaskPair& masks) {
  check(a.defined() && a.rank() == 2 && a.dim(0) == a.dim(1),
        "apply_stablemask: scores must be square");
  check(a.dtype() == Dtype::f64, "apply_stablemask: scores must be f64");
  const int n = a.dim(0);
  check(masks.c.defined() && masks.c.dim(0) == n && masks.p.dim(0) == n,
        "apply_stablemask: mask size mismatch");

  const auto& av = a.raw_f64();
  const auto& cv = masks.c.raw_f64();
  const auto& pv = masks.p.raw_f64();

  StableMaskResult out;
  out.attn = Tensor::zeros({n, n});
  out.alpha.assign(static_cast<std::size_t>(n), 0.0);
  auto& t = out.attn.raw_f64();

  std::vector<double> row(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double s = av[off + j];
      if (std::isnan(s)) fail("apply_stablemask: NaN score at row " +
                              std::to_string(i));
      row[static_cast<std::size_t>(j)] = s * cv[off + j] + pv[off + j];
    }
    softmax_inplace(row.data(), n);
    double alpha = 0.0;
    for (int j = 0; j < n; ++j) {
      const double w = row[static_cast<std::size_t>(j)] * cv[off + j];
      t[off + j] = w;
      alpha += w;
    }
    out.alpha[static_cast<std::size_t>(i)] = alpha;
  }
  return out;
}

// ----- tau -----

double pseudo_suffix_mass(int i, int n, double gamma) {
  check(i >= 1 && i <= n, "pseudo_suffix_mass: need 1 <= i <= n");
  double s = 0.0;
  for (int k = i; k <= n - 1; ++k) s += std::exp(-k * gamma);
  return s;
}

double tau_infer(int n, int N, double gamma) {
  check(n >= 1 && n <= N, "tau_infer: need 1 <= n <= N");
  check(std::isfinite(gamma) && gamma > 0.0, "tau_infer: gamma must be > 0");
  if (n == N) return kNegInf;
  return std::log(pseudo_suffix_mass(n, N, gamma));
}

double tau_extrapolate(int n, double gamma) {
  check(n >= 1, "tau_extrapolate: n must be >= 1");
  check(std::isfinite(gamma) && gamma > 0.0,
        "tau_extrapolate: gamma must be > 0");
  return -static_cast<double>(n) * gamma;
}

double row_tau(int i, int n, const MaskSpec& spec, int head) {
  spec.validate();
  check(i >= 1 && i <= n, "row_tau: need 1 <= i <= n");
  const double g = spec.gamma(head);
  const int N = spec.max_train_len;
  switch (spec.mode) {
    case MaskMode::train:
      return tau_infer(i, n, g);
    case MaskMode::infer:
      check(n <= N, "row_tau: infer mode needs n <= max_train_len, got n=" +
                        std::to_string(n) + " N=" + std::to_string(N));
      return tau_infer(i, N, g);
    case MaskMode::extrapolate:
      return i <= N ? tau_infer(i, N, g) : tau_extrapolate(i, g);
  }
  return kNegInf;
}

InferRow build_infer_row(const std::vector<double>& logits, int n, int N,
                         double gamma) {
  check(static_cast<int>(logits.size()) == n,
        "build_infer_row: logits length " + std::to_string(logits.size()) +
            " != n " + std::to_string(n));
  const double tau =
      n <= N ? tau_infer(n, N, gamma) : tau_extrapolate(n, gamma);
  std::vector<double> row(logits);
  row.push_back(tau);
  softmax_inplace(row.data(), n + 1);
  InferRow out;
  out.attn.assign(row.begin(), row.begin() + n);
  double alpha = 0.0;
  for (int j = 0; j < n; ++j) alpha += out.attn[static_cast<std::size_t>(j)];
  out.alpha = alpha;
  return out;
}

double xi_position(int i, int n, double gamma) {
  check(i >= 1 && i <= n, "xi_position: need 1 <= i <= n");
  const double s = pseudo_suffix_mass(i, n, gamma);
  return static_cast<double>(i) / (static_cast<double>(i) + s);
}

}  // namespace masklab
