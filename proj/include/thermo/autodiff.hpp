#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Operations record themselves on the tape that is active on the calling
// thread (see Tape::Scope) whenever at least one input requires a gradient.
// Without an active tape every operation is a plain forward computation, which
// is what inference and the frozen-model paths use.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace thermo::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is first written
  bool requires_grad = false;
  bool is_leaf = true;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer, allocated as zeros on first access.
  std::span<double> grad();
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad();

  bool all_finite() const;

  // Deep copy of values into a new leaf.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const noexcept { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Recording of differentiable operations in execution order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Tape receiving operations on this thread, or nullptr.
  static Tape* active() noexcept;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
  // Leaf gradients accumulate across calls; intermediate gradients are reset
  // at the start of each call.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// Convenience: backward on the active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// [n,k] x [k,m] -> [n,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// x [n,m] plus b [m] on every row.
Tensor bias_add(const Tensor& x, const Tensor& bias);

// ---------------------------------------------------------------------------
// Convolutional building blocks

enum class ConvAlgo { Direct, Im2col };

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  ConvAlgo algo = ConvAlgo::Im2col;
};

// Cross-correlation of input [N,C,H,W] with weight [F,C,kh,kw]; bias [F] may
// be an undefined tensor.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& options = {});

enum class Mode { Train, Eval };

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;

  static BatchNormStats identity(std::size_t channels);
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization of [N,C,H,W]. Train mode uses batch statistics
// and updates `stats`; Eval mode normalizes with `stats`.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, Mode mode, const BatchNormOptions& options = {});

// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& input);

// Mean absolute difference of two [N] tensors; the target never receives a
// gradient through this op's rule unless it requires one.
Tensor l1_loss(const Tensor& pred, const Tensor& target);

// ---------------------------------------------------------------------------
// Serialization: rank (u64 LE), dims (u64 LE each), values (f64 LE each).

void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

}  // namespace thermo::ad
