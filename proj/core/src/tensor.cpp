#include "masklab/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

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

// ----- dtype -----

const char* dtype_name(Dtype dt) { return dt == Dtype::f64 ? "f64" : "f32"; }

Dtype dtype_from_name(const std::string& name) {
  if (name == "f64") return Dtype::f64;
  if (name == "f32") return Dtype::f32;
  fail("unknown dtype '" + name + "'");
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    check(d >= 0, "negative dimension in shape");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ----- storage -----

namespace detail {

void TensorData::ensure_grad() {
  if (dtype == Dtype::f64) {
    if (g64.empty()) g64.assign(v64.size(), 0.0);
  } else {
    if (g32.empty()) g32.assign(v32.size(), 0.0f);
  }
}

void TensorData::drop_grad() {
  g64.clear();
  g32.clear();
}

}  // namespace detail

namespace {

template <class T>
std::vector<T>& val(detail::TensorData& d);
template <>
std::vector<double>& val<double>(detail::TensorData& d) { return d.v64; }
template <>
std::vector<float>& val<float>(detail::TensorData& d) { return d.v32; }

template <class T>
std::vector<T>& grad(detail::TensorData& d);
template <>
std::vector<double>& grad<double>(detail::TensorData& d) { return d.g64; }
template <>
std::vector<float>& grad<float>(detail::TensorData& d) { return d.g32; }

}  // namespace

// ----- Tensor -----

Tensor Tensor::zeros(Shape shape, Dtype dt) {
  auto data = std::make_shared<detail::TensorData>();
  data->shape = std::move(shape);
  data->dtype = dt;
  auto n = static_cast<std::size_t>(data->numel());
  if (dt == Dtype::f64)
    data->v64.assign(n, 0.0);
  else
    data->v32.assign(n, 0.0f);
  return Tensor(std::move(data));
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t = zeros(std::move(shape), dt);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values,
                           Dtype dt) {
  check(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
        "from_values: " + shape_str(shape) + " does not hold " +
            std::to_string(values.size()) + " values");
  Tensor t = zeros(std::move(shape), dt);
  for (std::size_t i = 0; i < values.size(); ++i)
    t.set(static_cast<std::int64_t>(i), values[i]);
  return t;
}

Tensor Tensor::scalar(double value, Dtype dt) {
  return from_values({}, {value}, dt);
}

const Shape& Tensor::shape() const {
  check(defined(), "shape() on undefined tensor");
  return data_->shape;
}

int Tensor::dim(int i) const {
  check(defined() && i >= 0 && i < static_cast<int>(data_->shape.size()),
        "dim() out of range");
  return data_->shape[i];
}

int Tensor::rank() const {
  check(defined(), "rank() on undefined tensor");
  return static_cast<int>(data_->shape.size());
}

std::int64_t Tensor::numel() const {
  check(defined(), "numel() on undefined tensor");
  return data_->numel();
}

Dtype Tensor::dtype() const {
  check(defined(), "dtype() on undefined tensor");
  return data_->dtype;
}

bool Tensor::requires_grad() const {
  return defined() && data_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
  check(defined(), "set_requires_grad on undefined tensor");
  data_->requires_grad = flag;
  if (flag) data_->ensure_grad();
}

bool Tensor::has_grad() const { return defined() && data_->has_grad(); }

void Tensor::ensure_grad() {
  check(defined(), "ensure_grad on undefined tensor");
  data_->ensure_grad();
}

void Tensor::zero_grad() {
  if (!defined()) return;
  std::fill(data_->g64.begin(), data_->g64.end(), 0.0);
  std::fill(data_->g32.begin(), data_->g32.end(), 0.0f);
}

double Tensor::at(std::int64_t i) const {
  assert(defined() && i >= 0 && i < numel());
  return data_->dtype == Dtype::f64
             ? data_->v64[static_cast<std::size_t>(i)]
             : static_cast<double>(data_->v32[static_cast<std::size_t>(i)]);
}

void Tensor::set(std::int64_t i, double value) {
  assert(defined() && i >= 0 && i < numel());
  if (data_->dtype == Dtype::f64)
    data_->v64[static_cast<std::size_t>(i)] = value;
  else
    data_->v32[static_cast<std::size_t>(i)] = static_cast<float>(value);
}

double Tensor::grad_at(std::int64_t i) const {
  assert(defined() && i >= 0 && i < numel());
  if (!data_->has_grad()) return 0.0;
  return data_->dtype == Dtype::f64
             ? data_->g64[static_cast<std::size_t>(i)]
             : static_cast<double>(data_->g32[static_cast<std::size_t>(i)]);
}

void Tensor::add_grad(std::int64_t i, double g) {
  assert(defined() && i >= 0 && i < numel());
  data_->ensure_grad();
  if (data_->dtype == Dtype::f64)
    data_->g64[static_cast<std::size_t>(i)] += g;
  else
    data_->g32[static_cast<std::size_t>(i)] += static_cast<float>(g);
}

std::vector<double> Tensor::values() const {
  check(defined(), "values() on undefined tensor");
  if (data_->dtype == Dtype::f64) return data_->v64;
  return std::vector<double>(data_->v32.begin(), data_->v32.end());
}

std::vector<double> Tensor::grads() const {
  check(defined(), "grads() on undefined tensor");
  std::vector<double> out(static_cast<std::size_t>(numel()), 0.0);
  if (!data_->has_grad()) return out;
  if (data_->dtype == Dtype::f64) return data_->g64;
  return std::vector<double>(data_->g32.begin(), data_->g32.end());
}

void Tensor::fill(double value) {
  check(defined(), "fill on undefined tensor");
  if (data_->dtype == Dtype::f64)
    std::fill(data_->v64.begin(), data_->v64.end(), value);
  else
    std::fill(data_->v32.begin(), data_->v32.end(),
              static_cast<float>(value));
}

void Tensor::copy_values_from(const Tensor& other) {
  check(defined() && other.defined(), "copy_values_from: undefined tensor");
  check(numel() == other.numel(),
        "copy_values_from: numel mismatch " + shape_str(shape()) + " vs " +
            shape_str(other.shape()));
  for (std::int64_t i = 0; i < numel(); ++i) set(i, other.at(i));
}

std::vector<double>& Tensor::raw_f64() {
  check(defined() && data_->dtype == Dtype::f64, "raw_f64 on non-f64 tensor");
  return data_->v64;
}

const std::vector<double>& Tensor::raw_f64() const {
  check(defined() && data_->dtype == Dtype::f64, "raw_f64 on non-f64 tensor");
  return data_->v64;
}

std::vector<float>& Tensor::raw_f32() {
  check(defined() && data_->dtype == Dtype::f32, "raw_f32 on non-f32 tensor");
  return data_->v32;
}

const std::vector<float>& Tensor::raw_f32() const {
  check(defined() && data_->dtype == Dtype::f32, "raw_f32 on non-f32 tensor");
  return data_->v32;
}

// ----- graph plumbing -----

Tensor Graph::make_like(const Tensor& src, Shape shape) const {
  return Tensor::zeros(std::move(shape), src.dtype());
}

void Graph::record(bool any_grad, std::function<void()> fn) {
  if (recording_ && any_grad) nodes_.push_back(std::move(fn));
}

void Graph::backward(const Tensor& loss) {
  check(loss.defined(), "backward: undefined loss");
  check(loss.numel() == 1, "backward: loss must be scalar, got " +
                               shape_str(loss.shape()));
  if (!recording_) throw std::logic_error("backward on a no-grad graph");
  if (backward_done_)
    throw std::logic_error("backward called twice without reset()");
  loss.data()->ensure_grad();
  if (loss.dtype() == Dtype::f64)
    loss.data()->g64[0] = 1.0;
  else
    loss.data()->g32[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  backward_done_ = true;
}

void Graph::reset() {
  nodes_.clear();
  backward_done_ = false;
}

namespace {

using DataPtr = std::shared_ptr<detail::TensorData>;

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  check(a.dtype() == b.dtype(),
        std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) +
            " vs " + dtype_name(b.dtype()));
}

void check_rank2(const Tensor& a, const char* op) {
  check(a.rank() == 2, std::string(op) + ": expected rank-2, got " +
                           shape_str(a.shape()));
}

// ----- kernels, templated over storage type -----

template <class T>
void matmul_fwd(const std::vector<T>& a, const std::vector<T>& b,
                std::vector<T>& y, int n, int k, int m) {
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < k; ++p) {
      const T av = a[static_cast<std::size_t>(i) * k + p];
      const std::size_t yo = static_cast<std::size_t>(i) * m;
      const std::size_t bo = static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) y[yo + j] += av * b[bo + j];
    }
}

template <class T>
void matmul_bwd(detail::TensorData& a, detail::TensorData& b,
                detail::TensorData& y, int n, int k, int m) {
  const auto& av = val<T>(a);
  const auto& bv = val<T>(b);
  const auto& gy = grad<T>(y);
  if (a.requires_grad) {
    auto& ga = grad<T>(a);
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < k; ++p) {
        T acc = 0;
        for (int j = 0; j < m; ++j)
          acc += gy[static_cast<std::size_t>(i) * m + j] *
                 bv[static_cast<std::size_t>(p) * m + j];
        ga[static_cast<std::size_t>(i) * k + p] += acc;
      }
  }
  if (b.requires_grad) {
    auto& gb = grad<T>(b);
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < m; ++j) {
        T acc = 0;
        for (int i = 0; i < n; ++i)
          acc += av[static_cast<std::size_t>(i) * k + p] *
                 gy[static_cast<std::size_t>(i) * m + j];
        gb[static_cast<std::size_t>(p) * m + j] += acc;
      }
  }
}

}  // namespace

// ----- ops -----

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  check_same_dtype(a, b, "matmul");
  check(a.dim(1) == b.dim(0), "matmul: shape mismatch " +
                                  shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor y = make_like(a, {n, m});
  if (a.dtype() == Dtype::f64)
    matmul_fwd<double>(a.data()->v64, b.data()->v64, y.data()->v64, n, k, m);
  else
    matmul_fwd<float>(a.data()->v32, b.data()->v32, y.data()->v32, n, k, m);
  const bool any = a.requires_grad() || b.requires_grad();
  if (recording_ && any) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), bd = b.data(), yd = y.data(), n, k, m] {
      ad->ensure_grad();
      bd->ensure_grad();
      yd->ensure_grad();
      if (ad->dtype == Dtype::f64)
        matmul_bwd<double>(*ad, *bd, *yd, n, k, m);
      else
        matmul_bwd<float>(*ad, *bd, *yd, n, k, m);
    });
  }
  return y;
}

Tensor Graph::transpose(const Tensor& a) {
  check_rank2(a, "transpose");
  const int n = a.dim(0), m = a.dim(1);
  Tensor y = make_like(a, {m, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) y.set(j * n + i, a.at(i * m + j));
  if (recording_ && a.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), yd = y.data(), n, m] {
      ad->ensure_grad();
      yd->ensure_grad();
      Tensor at(ad), yt(yd);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j)
          at.add_grad(i * m + j, yt.grad_at(j * n + i));
    });
  }
  return y;
}

namespace {

enum class BinKind { add, sub, mul };

template <class T>
void bin_fwd(BinKind kind, const std::vector<T>& a, const std::vector<T>& b,
             std::vector<T>& y) {
  switch (kind) {
    case BinKind::add:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
      break;
    case BinKind::sub:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
      break;
    case BinKind::mul:
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
      break;
  }
}

template <class T>
void bin_bwd(BinKind kind, detail::TensorData& a, detail::TensorData& b,
             detail::TensorData& y) {
  const auto& gy = grad<T>(y);
  if (a.requires_grad) {
    auto& ga = grad<T>(a);
    const auto& bv = val<T>(b);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      switch (kind) {
        case BinKind::add:
        case BinKind::sub:
          ga[i] += gy[i];
          break;
        case BinKind::mul:
          ga[i] += gy[i] * bv[i];
          break;
      }
    }
  }
  if (b.requires_grad) {
    auto& gb = grad<T>(b);
    const auto& av = val<T>(a);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      switch (kind) {
        case BinKind::add:
          gb[i] += gy[i];
          break;
        case BinKind::sub:
          gb[i] -= gy[i];
          break;
        case BinKind::mul:
          gb[i] += gy[i] * av[i];
          break;
      }
    }
  }
}

}  // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "add");
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor y = make_like(a, a.shape());
  const bool any = a.requires_grad() || b.requires_grad();
  auto run = [&](auto tag) {
    using T = decltype(tag);
    bin_fwd<T>(BinKind::add, val<T>(*a.data()), val<T>(*b.data()),
               val<T>(*y.data()));
  };
  if (a.dtype() == Dtype::f64) run(double{}); else run(float{});
  if (recording_ && any) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), bd = b.data(), yd = y.data()] {
      ad->ensure_grad();
      bd->ensure_grad();
      yd->ensure_grad();
      if (ad->dtype == Dtype::f64)
        bin_bwd<double>(BinKind::add, *ad, *bd, *yd);
      else
        bin_bwd<float>(BinKind::add, *ad, *bd, *yd);
    });
  }
  return y;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "sub");
  check(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor y = make_like(a, a.shape());
  if (a.dtype() == Dtype::f64)
    bin_fwd<double>(BinKind::sub, a.data()->v64, b.data()->v64, y.data()->v64);
  else
    bin_fwd<float>(BinKind::sub, a.data()->v32, b.data()->v32, y.data()->v32);
  if (recording_ && (a.requires_grad() || b.requires_grad())) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), bd = b.data(), yd = y.data()] {
      ad->ensure_grad();
      bd->ensure_grad();
      yd->ensure_grad();
      if (ad->dtype == Dtype::f64)
        bin_bwd<double>(BinKind::sub, *ad, *bd, *yd);
      else
        bin_bwd<float>(BinKind::sub, *ad, *bd, *yd);
    });
  }
  return y;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "mul");
  check(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor y = make_like(a, a.shape());
  if (a.dtype() == Dtype::f64)
    bin_fwd<double>(BinKind::mul, a.data()->v64, b.data()->v64, y.data()->v64);
  else
    bin_fwd<float>(BinKind::mul, a.data()->v32, b.data()->v32, y.data()->v32);
  if (recording_ && (a.requires_grad() || b.requires_grad())) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), bd = b.data(), yd = y.data()] {
      ad->ensure_grad();
      bd->ensure_grad();
      yd->ensure_grad();
      if (ad->dtype == Dtype::f64)
        bin_bwd<double>(BinKind::mul, *ad, *bd, *yd);
      else
        bin_bwd<float>(BinKind::mul, *ad, *bd, *yd);
    });
  }
  return y;
}

Tensor Graph::scale(const Tensor& a, double c) {
  Tensor y = make_like(a, a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) y.set(i, c * a.at(i));
  if (recording_ && a.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), yd = y.data(), c] {
      ad->ensure_grad();
      yd->ensure_grad();
      Tensor at(ad), yt(yd);
      for (std::int64_t i = 0; i < at.numel(); ++i)
        at.add_grad(i, c * yt.grad_at(i));
    });
  }
  return y;
}

Tensor Graph::neg(const Tensor& a) { return scale(a, -1.0); }

namespace {

// Unary op with dy/dx expressible from (x, y).
template <class T, class F, class DF>
void unary_fwd(const std::vector<T>& x, std::vector<T>& y, F f, DF) {
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = static_cast<T>(f(static_cast<double>(x[i])));
}

template <class T, class F, class DF>
void unary_bwd(detail::TensorData& x, detail::TensorData& y, F, DF df) {
  auto& gx = grad<T>(x);
  const auto& gy = grad<T>(y);
  const auto& xv = val<T>(x);
  const auto& yv = val<T>(y);
  for (std::size_t i = 0; i < gx.size(); ++i)
    gx[i] += static_cast<T>(static_cast<double>(gy[i]) *
                            df(static_cast<double>(xv[i]),
                               static_cast<double>(yv[i])));
}

}  // namespace

#define MASKLAB_UNARY_OP(NAME, FWD, BWD)                                    \
  Tensor Graph::NAME(const Tensor& a) {                                     \
    Tensor y = make_like(a, a.shape());                                     \
    auto f = [](double x) { return FWD; };                                  \
    auto df = [](double x, double yv) { (void)x; (void)yv; return BWD; };   \
    if (a.dtype() == Dtype::f64)                                            \
      unary_fwd<double>(a.data()->v64, y.data()->v64, f, df);               \
    else                                                                    \
      unary_fwd<float>(a.data()->v32, y.data()->v32, f, df);                \
    if (recording_ && a.requires_grad()) {                                  \
      y.data()->requires_grad = true;                                       \
      record(true, [ad = a.data(), yd = y.data(), f, df] {                  \
        ad->ensure_grad();                                                  \
        yd->ensure_grad();                                                  \
        if (ad->dtype == Dtype::f64)                                        \
          unary_bwd<double>(*ad, *yd, f, df);                               \
        else                                                                \
          unary_bwd<float>(*ad, *yd, f, df);                                \
      });                                                                   \
    }                                                                       \
    return y;                                                               \
  }

// exp(-inf) == 0 and d/dx exp at -inf is y == 0, both by IEEE arithmetic.
MASKLAB_UNARY_OP(exp, std::exp(x), yv)
MASKLAB_UNARY_OP(log, std::log(x), 1.0 / x)

#undef MASKLAB_UNARY_OP

Tensor Graph::silu(const Tensor& a) {
  Tensor y = make_like(a, a.shape());
  auto f = [](double x) { return x / (1.0 + std::exp(-x)); };
  auto df = [](double x, double) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
  };
  if (a.dtype() == Dtype::f64)
    unary_fwd<double>(a.data()->v64, y.data()->v64, f, df);
  else
    unary_fwd<float>(a.data()->v32, y.data()->v32, f, df);
  if (recording_ && a.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), yd = y.data(), f, df] {
      ad->ensure_grad();
      yd->ensure_grad();
      if (ad->dtype == Dtype::f64)
        unary_bwd<double>(*ad, *yd, f, df);
      else
        unary_bwd<float>(*ad, *yd, f, df);
    });
  }
  return y;
}

namespace {

template <class T>
void softmax_rows_fwd(const std::vector<T>& x, std::vector<T>& y, int n,
                      int m) {
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * m;
    double mx = kNegInf;
    for (int j = 0; j < m; ++j) {
      const double v = static_cast<double>(x[off + j]);
      if (std::isnan(v)) fail("softmax_rows: NaN input at row " +
                              std::to_string(i));
      mx = std::max(mx, v);
    }
    if (mx == kNegInf) {
      for (int j = 0; j < m; ++j) y[off + j] = 0;
      continue;
    }
    double s = 0.0;
    for (int j = 0; j < m; ++j) {
      const double v = static_cast<double>(x[off + j]);
      const double e = (v == kNegInf) ? 0.0 : std::exp(v - mx);
      y[off + j] = static_cast<T>(e);
      s += e;
    }
    for (int j = 0; j < m; ++j)
      y[off + j] = static_cast<T>(static_cast<double>(y[off + j]) / s);
  }
}

template <class T>
void softmax_rows_bwd(detail::TensorData& x, detail::TensorData& y, int n,
                      int m) {
  auto& gx = grad<T>(x);
  const auto& gy = grad<T>(y);
  const auto& yv = val<T>(y);
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * m;
    double dot = 0.0;
    for (int j = 0; j < m; ++j)
      dot += static_cast<double>(gy[off + j]) *
             static_cast<double>(yv[off + j]);
    for (int j = 0; j < m; ++j)
      gx[off + j] += static_cast<T>(
          static_cast<double>(yv[off + j]) *
          (static_cast<double>(gy[off + j]) - dot));
  }
}

}  // namespace

Tensor Graph::softmax_rows(const Tensor& a) {
  check_rank2(a, "softmax_rows");
  const int n = a.dim(0), m = a.dim(1);
  Tensor y = make_like(a, a.shape());
  if (a.dtype() == Dtype::f64)
    softmax_rows_fwd<double>(a.data()->v64, y.data()->v64, n, m);
  else
    softmax_rows_fwd<float>(a.data()->v32, y.data()->v32, n, m);
  if (recording_ && a.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), yd = y.data(), n, m] {
      ad->ensure_grad();
      yd->ensure_grad();
      if (ad->dtype == Dtype::f64)
        softmax_rows_bwd<double>(*ad, *yd, n, m);
      else
        softmax_rows_bwd<float>(*ad, *yd, n, m);
    });
  }
  return y;
}

namespace {

template <class T>
void rmsnorm_fwd(const std::vector<T>& x, const std::vector<T>& w,
                 std::vector<T>& y, int n, int d, double eps) {
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) {
      const double v = static_cast<double>(x[off + j]);
      ms += v * v;
    }
    ms /= d;
    const double r = 1.0 / std::sqrt(ms + eps);
    for (int j = 0; j < d; ++j)
      y[off + j] = static_cast<T>(static_cast<double>(x[off + j]) * r *
                                  static_cast<double>(w[j]));
  }
}

template <class T>
void rmsnorm_bwd(detail::TensorData& x, detail::TensorData& w,
                 detail::TensorData& y, int n, int d, double eps) {
  const auto& xv = val<T>(x);
  const auto& wv = val<T>(w);
  const auto& gy = grad<T>(y);
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) {
      const double v = static_cast<double>(xv[off + j]);
      ms += v * v;
    }
    ms /= d;
    const double r = 1.0 / std::sqrt(ms + eps);
    double dot = 0.0;
    for (int j = 0; j < d; ++j)
      dot += static_cast<double>(gy[off + j]) *
             static_cast<double>(wv[j]) * static_cast<double>(xv[off + j]);
    if (x.requires_grad) {
      auto& gx = grad<T>(x);
      for (int j = 0; j < d; ++j) {
        const double g = static_cast<double>(gy[off + j]);
        const double xj = static_cast<double>(xv[off + j]);
        gx[off + j] += static_cast<T>(
            r * (g * static_cast<double>(wv[j]) - xj * r * r * dot / d));
      }
    }
    if (w.requires_grad) {
      auto& gw = grad<T>(w);
      for (int j = 0; j < d; ++j)
        gw[j] += static_cast<T>(static_cast<double>(gy[off + j]) *
                                static_cast<double>(xv[off + j]) * r);
    }
  }
}

}  // namespace

Tensor Graph::rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  check_rank2(x, "rmsnorm");
  check(weight.rank() == 1 && weight.dim(0) == x.dim(1),
        "rmsnorm: weight shape " + shape_str(weight.shape()) +
            " does not match input " + shape_str(x.shape()));
  check_same_dtype(x, weight, "rmsnorm");
  const int n = x.dim(0), d = x.dim(1);
  Tensor y = make_like(x, x.shape());
  if (x.dtype() == Dtype::f64)
    rmsnorm_fwd<double>(x.data()->v64, weight.data()->v64, y.data()->v64, n, d,
                        eps);
  else
    rmsnorm_fwd<float>(x.data()->v32, weight.data()->v32, y.data()->v32, n, d,
                       eps);
  if (recording_ && (x.requires_grad() || weight.requires_grad())) {
    y.data()->requires_grad = true;
    record(true, [xd = x.data(), wd = weight.data(), yd = y.data(), n, d,
                  eps] {
      xd->ensure_grad();
      wd->ensure_grad();
      yd->ensure_grad();
      if (xd->dtype == Dtype::f64)
        rmsnorm_bwd<double>(*xd, *wd, *yd, n, d, eps);
      else
        rmsnorm_bwd<float>(*xd, *wd, *yd, n, d, eps);
    });
  }
  return y;
}

Tensor Graph::embedding(const Tensor& table, const std::vector<int>& ids) {
  check_rank2(table, "embedding");
  const int vocab = table.dim(0), d = table.dim(1);
  for (int id : ids)
    check(id >= 0 && id < vocab,
          "embedding: id " + std::to_string(id) + " out of range [0," +
              std::to_string(vocab) + ")");
  const int n = static_cast<int>(ids.size());
  Tensor y = make_like(table, {n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      y.set(static_cast<std::int64_t>(i) * d + j,
            table.at(static_cast<std::int64_t>(ids[i]) * d + j));
  if (recording_ && table.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [td = table.data(), yd = y.data(), ids, d] {
      td->ensure_grad();
      yd->ensure_grad();
      Tensor tt(td), yt(yd);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          tt.add_grad(static_cast<std::int64_t>(ids[i]) * d + j,
                      yt.grad_at(static_cast<std::int64_t>(i) * d + j));
    });
  }
  return y;
}

namespace {

template <class T>
void rotate_fwd(const std::vector<T>& x, const std::vector<double>& ang,
                std::vector<T>& y, int n, int d) {
  const int h = d / 2;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < h; ++k) {
      const double c = std::cos(ang[static_cast<std::size_t>(i) * h + k]);
      const double s = std::sin(ang[static_cast<std::size_t>(i) * h + k]);
      const std::size_t o = static_cast<std::size_t>(i) * d + 2 * k;
      const double x0 = static_cast<double>(x[o]);
      const double x1 = static_cast<double>(x[o + 1]);
      y[o] = static_cast<T>(c * x0 - s * x1);
      y[o + 1] = static_cast<T>(s * x0 + c * x1);
    }
}

template <class T>
void rotate_bwd(detail::TensorData& x, detail::TensorData& y,
                const std::vector<double>& ang, int n, int d) {
  const int h = d / 2;
  auto& gx = grad<T>(x);
  const auto& gy = grad<T>(y);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < h; ++k) {
      const double c = std::cos(ang[static_cast<std::size_t>(i) * h + k]);
      const double s = std::sin(ang[static_cast<std::size_t>(i) * h + k]);
      const std::size_t o = static_cast<std::size_t>(i) * d + 2 * k;
      const double g0 = static_cast<double>(gy[o]);
      const double g1 = static_cast<double>(gy[o + 1]);
      gx[o] += static_cast<T>(c * g0 + s * g1);
      gx[o + 1] += static_cast<T>(-s * g0 + c * g1);
    }
}

}  // namespace

Tensor Graph::pairwise_rotate(const Tensor& x,
                              const std::vector<double>& angles) {
  check_rank2(x, "pairwise_rotate");
  const int n = x.dim(0), d = x.dim(1);
  check(d % 2 == 0, "pairwise_rotate: odd column count " + std::to_string(d));
  check(static_cast<std::int64_t>(angles.size()) ==
            static_cast<std::int64_t>(n) * (d / 2),
        "pairwise_rotate: angle count mismatch");
  Tensor y = make_like(x, x.shape());
  if (x.dtype() == Dtype::f64)
    rotate_fwd<double>(x.data()->v64, angles, y.data()->v64, n, d);
  else
    rotate_fwd<float>(x.data()->v32, angles, y.data()->v32, n, d);
  if (recording_ && x.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [xd = x.data(), yd = y.data(), angles, n, d] {
      xd->ensure_grad();
      yd->ensure_grad();
      if (xd->dtype == Dtype::f64)
        rotate_bwd<double>(*xd, *yd, angles, n, d);
      else
        rotate_bwd<float>(*xd, *yd, angles, n, d);
    });
  }
  return y;
}

Tensor Graph::append_col(const Tensor& x, const std::vector<double>& col) {
  check_rank2(x, "append_col");
  const int n = x.dim(0), m = x.dim(1);
  check(static_cast<int>(col.size()) == n, "append_col: column length " +
                                               std::to_string(col.size()) +
                                               " vs " + std::to_string(n) +
                                               " rows");
  Tensor y = make_like(x, {n, m + 1});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < m; ++j)
      y.set(i * (m + 1) + j, x.at(i * m + j));
    y.set(i * (m + 1) + m, col[static_cast<std::size_t>(i)]);
  }
  if (recording_ && x.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [xd = x.data(), yd = y.data(), n, m] {
      xd->ensure_grad();
      yd->ensure_grad();
      Tensor xt(xd), yt(yd);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j)
          xt.add_grad(i * m + j, yt.grad_at(i * (m + 1) + j));
    });
  }
  return y;
}

Tensor Graph::slice_cols(const Tensor& x, int c0, int c1) {
  check_rank2(x, "slice_cols");
  const int n = x.dim(0), m = x.dim(1);
  check(0 <= c0 && c0 < c1 && c1 <= m, "slice_cols: bad range [" +
                                           std::to_string(c0) + "," +
                                           std::to_string(c1) + ") for " +
                                           shape_str(x.shape()));
  const int w = c1 - c0;
  Tensor y = make_like(x, {n, w});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      y.set(i * w + j, x.at(i * m + c0 + j));
  if (recording_ && x.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [xd = x.data(), yd = y.data(), n, m, c0, w] {
      xd->ensure_grad();
      yd->ensure_grad();
      Tensor xt(xd), yt(yd);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < w; ++j)
          xt.add_grad(i * m + c0 + j, yt.grad_at(i * w + j));
    });
  }
  return y;
}

namespace {

template <class T>
double ce_fwd(const std::vector<T>& logits, const std::vector<int>& targets,
              const std::vector<double>& weights, int n, int v) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (weights[static_cast<std::size_t>(i)] == 0.0) continue;
    const std::size_t off = static_cast<std::size_t>(i) * v;
    double mx = kNegInf;
    for (int j = 0; j < v; ++j)
      mx = std::max(mx, static_cast<double>(logits[off + j]));
    double s = 0.0;
    for (int j = 0; j < v; ++j)
      s += std::exp(static_cast<double>(logits[off + j]) - mx);
    const double lse = mx + std::log(s);
    total += weights[static_cast<std::size_t>(i)] *
             (lse - static_cast<double>(logits[off + targets[i]]));
  }
  return total;
}

template <class T>
void ce_bwd(detail::TensorData& logits, detail::TensorData& out,
            const std::vector<int>& targets,
            const std::vector<double>& weights, int n, int v) {
  const double g = out.dtype == Dtype::f64
                       ? out.g64[0]
                       : static_cast<double>(out.g32[0]);
  const auto& lv = val<T>(logits);
  auto& gl = grad<T>(logits);
  for (int i = 0; i < n; ++i) {
    const double w = weights[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const std::size_t off = static_cast<std::size_t>(i) * v;
    double mx = kNegInf;
    for (int j = 0; j < v; ++j)
      mx = std::max(mx, static_cast<double>(lv[off + j]));
    double s = 0.0;
    for (int j = 0; j < v; ++j)
      s += std::exp(static_cast<double>(lv[off + j]) - mx);
    for (int j = 0; j < v; ++j) {
      const double p = std::exp(static_cast<double>(lv[off + j]) - mx) / s;
      const double hit = (j == targets[i]) ? 1.0 : 0.0;
      gl[off + j] += static_cast<T>(g * w * (p - hit));
    }
  }
}

}  // namespace

Tensor Graph::cross_entropy_sum(const Tensor& logits,
                                const std::vector<int>& targets,
                                const std::vector<double>& weights) {
  check_rank2(logits, "cross_entropy_sum");
  const int n = logits.dim(0), v = logits.dim(1);
  check(static_cast<int>(targets.size()) == n,
        "cross_entropy_sum: target count mismatch");
  check(static_cast<int>(weights.size()) == n,
        "cross_entropy_sum: weight count mismatch");
  for (int t : targets)
    check(t >= 0 && t < v, "cross_entropy_sum: target " + std::to_string(t) +
                               " out of range [0," + std::to_string(v) + ")");
  double total = logits.dtype() == Dtype::f64
                     ? ce_fwd<double>(logits.data()->v64, targets, weights, n, v)
                     : ce_fwd<float>(logits.data()->v32, targets, weights, n, v);
  Tensor y = Tensor::scalar(total, logits.dtype());
  if (recording_ && logits.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [ld = logits.data(), yd = y.data(), targets, weights, n, v] {
      ld->ensure_grad();
      yd->ensure_grad();
      if (ld->dtype == Dtype::f64)
        ce_bwd<double>(*ld, *yd, targets, weights, n, v);
      else
        ce_bwd<float>(*ld, *yd, targets, weights, n, v);
    });
  }
  return y;
}

Tensor Graph::sum(const Tensor& a) {
  double total = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) total += a.at(i);
  Tensor y = Tensor::scalar(total, a.dtype());
  if (recording_ && a.requires_grad()) {
    y.data()->requires_grad = true;
    record(true, [ad = a.data(), yd = y.data()] {
      ad->ensure_grad();
      yd->ensure_grad();
      Tensor at(ad), yt(yd);
      const double g = yt.grad_at(0);
      for (std::int64_t i = 0; i < at.numel(); ++i) at.add_grad(i, g);
    });
  }
  return y;
}

// ----- plain helpers -----

double logsumexp(const double* x, int n) {
  double mx = kNegInf;
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (int i = 0; i < n; ++i)
    s += (x[i] == kNegInf) ? 0.0 : std::exp(x[i] - mx);
  return mx + std::log(s);
}

void softmax_inplace(double* x, int n) {
  double mx = kNegInf;
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  if (mx == kNegInf) {
    for (int i = 0; i < n; ++i) x[i] = 0.0;
    return;
  }
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = (x[i] == kNegInf) ? 0.0 : std::exp(x[i] - mx);
    s += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= s;
}

}  // namespace masklab
