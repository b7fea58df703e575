// Dense tensors plus a reverse-mode tape. f64 is the default precision;
// f32 storage is opt-in per tensor and gradients live in the same precision
// as their values. exp(-inf) == 0 is relied on throughout the masking code.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace masklab {

enum class Dtype : std::uint8_t { f64, f32 };

const char* dtype_name(Dtype dt);
Dtype dtype_from_name(const std::string& name);

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorData {
  Shape shape;
  Dtype dtype = Dtype::f64;
  bool requires_grad = false;
  std::vector<double> v64, g64;
  std::vector<float> v32, g32;

  std::int64_t numel() const { return shape_numel(shape); }
  bool has_grad() const { return !g64.empty() || !g32.empty(); }
  void ensure_grad();
  void drop_grad();
};

}  // namespace detail

// Shared-handle tensor: copies alias the same storage, like the usual
// autograd frameworks. Safe to hand between threads as long as no live
// Graph references it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dt = Dtype::f64);
  static Tensor full(Shape shape, double value, Dtype dt = Dtype::f64);
  static Tensor from_values(Shape shape, const std::vector<double>& values,
                            Dtype dt = Dtype::f64);
  static Tensor scalar(double value, Dtype dt = Dtype::f64);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int rank() const;
  std::int64_t numel() const;
  Dtype dtype() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  void ensure_grad();
  void zero_grad();

  // Element access converts to/from double regardless of storage dtype.
  double at(std::int64_t i) const;
  void set(std::int64_t i, double value);
  double grad_at(std::int64_t i) const;
  void add_grad(std::int64_t i, double g);

  std::vector<double> values() const;
  std::vector<double> grads() const;
  void fill(double value);
  void copy_values_from(const Tensor& other);

  // Raw storage access; dtype must match the accessor or it throws.
  std::vector<double>& raw_f64();
  const std::vector<double>& raw_f64() const;
  std::vector<float>& raw_f32();
  const std::vector<float>& raw_f32() const;

  std::shared_ptr<detail::TensorData> data() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> data)
      : data_(std::move(data)) {}
  std::shared_ptr<detail::TensorData> data_;
  friend class Graph;
};

// Reverse-mode tape. Ops run eagerly; when recording, each op pushes a
// backward closure so backward() replays the tape once in reverse order.
// A graph is single-threaded; distinct graphs may run on distinct threads.
class Graph {
 public:
  enum class Mode { record, no_grad };

  explicit Graph(Mode mode = Mode::record) : recording_(mode == Mode::record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and walks the tape backwards, visiting every
  // node exactly once. loss must be scalar; calling twice without reset()
  // throws.
  void backward(const Tensor& loss);
  void reset();

  // ----- ops -----
  // Shapes are {rows, cols} for rank-2, {n} for rank-1, {} for scalars.
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor neg(const Tensor& a);
  Tensor silu(const Tensor& a);

  // Row softmax over a rank-2 input. -inf entries contribute exactly zero
  // mass; an all -inf row yields an all-zero row. NaN input throws.
  Tensor softmax_rows(const Tensor& a);

  // y[i,:] = x[i,:] / sqrt(mean(x[i,:]^2) + eps) * weight
  Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);

  // Gathers rows of table (vocab x dim) by id; backward scatter-adds.
  Tensor embedding(const Tensor& table, const std::vector<int>& ids);

  // Rotates adjacent column pairs (2k, 2k+1) of x by angles[i][k].
  // angles is a plain (non-differentiable) n x cols/2 matrix.
  Tensor pairwise_rotate(const Tensor& x, const std::vector<double>& angles);

  // Appends one constant column; no gradient flows into col.
  Tensor append_col(const Tensor& x, const std::vector<double>& col);
  Tensor slice_cols(const Tensor& x, int c0, int c1);

  // Sum of weight[i] * cross_entropy(logits[i,:], target[i]). Weights of
  // zero drop a position entirely; callers divide by their own count.
  Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int>& targets,
                           const std::vector<double>& weights);

  Tensor sum(const Tensor& a);

 private:
  Tensor make_like(const Tensor& src, Shape shape) const;
  void record(bool any_grad, std::function<void()> fn);

  bool recording_ = true;
  bool backward_done_ = false;
  std::vector<std::function<void()>> nodes_;
};

// ----- plain helpers shared by non-graph code -----

// Deterministic helpers on raw rows; used by oracles and the decode path.
double logsumexp(const double* x, int n);
void softmax_inplace(double* x, int n);

}  // namespace masklab
