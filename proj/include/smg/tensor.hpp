#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace smg {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Dense row-major tensor of 64-bit floats.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v);
  static Tensor row(std::initializer_list<double> xs);
  static Tensor column(std::initializer_list<double> xs);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor uniform(Shape s, double lo, double hi, std::mt19937_64& rng);
  /// uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))
  static Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_matrix() const { return shape.size() == 2; }
  bool is_scalar() const { return numel() == 1; }
  double scalar_value() const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  Tensor& set_requires_grad(bool on = true) {
    requires_grad = on;
    return *this;
  }
};

/// CSR adjacency over n nodes. Undirected graphs store every edge in both
/// directions; targets are sorted ascending within each row, which fixes the
/// floating-point summation order of all neighbor reductions.
struct Csr {
  std::vector<int> offsets;  // size n+1
  std::vector<int> targets;

  int num_nodes() const { return offsets.empty() ? 0 : static_cast<int>(offsets.size()) - 1; }
  int degree(int v) const { return offsets[v + 1] - offsets[v]; }
};

/// Handle into a Tape. Cheap to copy; only meaningful with the tape that
/// issued it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Append-only record of primitive operations, evaluated eagerly.
/// backward() replays the record once, in reverse order, accumulating
/// chain-rule gradients. Single-writer: a tape must not be shared across
/// threads while ops are being recorded.
class Tape {
 public:
  /// Leaf whose gradient is tracked (model parameters, probe inputs).
  Var param(const Tensor& t);
  /// Leaf with no gradient tracking (features, masks given as data).
  Var constant(const Tensor& t);

  const Tensor& value(Var v) const;
  /// Gradient of the last backward() target w.r.t. v. Zero-filled for
  /// tracked leaves the loss does not reach.
  const Tensor& grad(Var v) const;

  Var matmul(Var a, Var b);
  /// a + b; b may be a [1 x d] row vector broadcast over a's rows.
  Var add(Var a, Var b);
  /// a * b elementwise; b may be an [n x 1] column broadcast over a's columns.
  Var mul(Var a, Var b);
  Var relu(Var x);
  Var sigmoid(Var x);
  Var concat_cols(Var a, Var b);
  /// Row v of the result is the sum of h's rows over v's neighbors,
  /// ascending neighbor index. Isolated nodes get a zero row.
  /// adj must outlive the tape.
  Var neighbor_sum(Var h, const Csr& adj);
  /// Per-segment column sums: boundaries has size G+1, boundaries.back() == rows(h).
  Var segment_sum(Var h, const std::vector<int>& boundaries);
  Var segment_mean(Var h, const std::vector<int>& boundaries);
  Var sum_all(Var x);
  Var mean_all(Var x);
  Var scale(Var x, double c);
  /// Mean over rows of -log softmax(logits)[label], max-subtraction stabilized.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);
  /// Mean |pred - target|; subgradient 0 at exact ties.
  Var mean_abs_error(Var pred, const Tensor& targets);

  void backward(Var loss);
  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;  // empty for leaves
  };

  std::vector<Slot> slots_;
  bool backward_done_ = false;

  int push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop);
  const Tensor& val(int id) const { return slots_[id].value; }
  Tensor& grd(int id) { return slots_[id].grad; }
  bool tracked(int id) const { return slots_[id].requires_grad; }
  void check_var(Var v, const char* who) const;
};

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of parameter tensors.
/// Moment tensors are zero-initialized and shaped like their parameters.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor*> params, AdamConfig cfg);

  /// One update. grads[i] pairs with params[i]. Throws TrainingError on
  /// non-finite gradients.
  void step(const std::vector<const Tensor*>& grads);

  void set_lr(double lr);
  double lr() const { return cfg_.lr; }
  long step_count() const { return step_count_; }

 private:
  std::vector<Tensor*> params_;
  AdamConfig cfg_;
  long step_count_ = 0;
  std::vector<Tensor> first_moment_, second_moment_;
};

}  // namespace smg
