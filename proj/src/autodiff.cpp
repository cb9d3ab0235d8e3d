#include "thermo/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "thermo/error.hpp"

namespace thermo::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using ImplPtr = std::shared_ptr<TensorImpl>;

thread_local Tape* g_active_tape = nullptr;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_result(Shape shape, bool tracked) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = tracked;
  impl->is_leaf = !tracked;
  return Tensor(std::move(impl));
}

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) fail(ErrorCode::InvalidInput, std::string(what) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    fail(ErrorCode::InvalidInput, std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <typename Forward, typename Backward>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Forward fwd,
                          Backward bwd) {
  require_same_shape(a, b, name);
  const bool tracked = tracking({&a, &b});
  Tensor out = make_result(a.shape(), tracked);
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(x[i], y[i]);
  if (tracked) {
    ImplPtr ai = a.impl(), bi = b.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({ai, bi}, out.impl(), [ai, bi, oi, bwd]() {
      const auto& go = oi->grad;
      const bool need_a = ai->requires_grad, need_b = bi->requires_grad;
      double* ga = need_a ? grad_buffer(*ai).data() : nullptr;
      double* gb = need_b ? grad_buffer(*bi).data() : nullptr;
      for (std::size_t i = 0; i < go.size(); ++i) {
        double da = 0.0, db = 0.0;
        bwd(ai->data[i], bi->data[i], go[i], da, db);
        if (need_a) ga[i] += da;
        if (need_b) gb[i] += db;
      }
    });
  }
  return out;
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, const Tensor& bias,
                           const Conv2dOptions& options) {
  require_defined(input, "conv2d input");
  require_defined(weight, "conv2d weight");
  if (input.rank() != 4 || weight.rank() != 4) {
    fail(ErrorCode::InvalidInput, "conv2d: expected rank-4 input and weight, got " +
                                      shape_string(input.shape()) + " and " +
                                      shape_string(weight.shape()));
  }
  if (options.stride == 0) fail(ErrorCode::InvalidInput, "conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.f = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = options.stride;
  g.pad = options.padding;
  if (weight.dim(1) != g.c) {
    fail(ErrorCode::InvalidInput, "conv2d: weight channels " + std::to_string(weight.dim(1)) +
                                      " != input channels " + std::to_string(g.c));
  }
  if (g.kh > g.h + 2 * g.pad || g.kw > g.w + 2 * g.pad || g.kh == 0 || g.kw == 0) {
    fail(ErrorCode::InvalidInput, "conv2d: kernel does not fit padded input");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.f)) {
    fail(ErrorCode::InvalidInput, "conv2d: bias must have shape [F]");
  }
  g.oh = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  return g;
}

// Valid output columns [lo, hi) for kernel column j: those whose input
// column ox*stride + j - pad lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(g.pad);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(g.w) - off + s - 1) / s;
  hi = std::clamp<std::ptrdiff_t>(hi, 0, static_cast<std::ptrdiff_t>(g.ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Column block for output rows [oy0, oy1):
// col[(ci*kh + i)*kw + j][(oy - oy0)*ow + ox] = x[ci][oy*s - p + i][ox*s - p + j]
void im2col(const double* x, const ConvGeometry& g, std::size_t oy0, std::size_t oy1,
            double* col) {
  const std::size_t P = (oy1 - oy0) * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const double* plane = x + ci * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [lo, hi] = valid_columns(g, j);
        double* row = col + ((ci * g.kh + i) * g.kw + j) * P;
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + (oy - oy0) * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          std::fill(dst, dst + lo, 0.0);
          std::fill(dst + hi, dst + g.ow, 0.0);
          if (lo == hi) continue;
          const double* src = plane + static_cast<std::size_t>(iy) * g.w + lo * g.stride + j - g.pad;
          if (g.stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * g.stride];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, std::size_t oy0, std::size_t oy1,
                double* dx) {
  const std::size_t P = (oy1 - oy0) * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    double* plane = dx + ci * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const auto [lo, hi] = valid_columns(g, j);
        const double* row = col + ((ci * g.kh + i) * g.kw + j) * P;
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          if (lo == hi) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w + lo * g.stride + j - g.pad;
          const double* src = row + (oy - oy0) * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * g.stride] += src[ox];
        }
      }
    }
  }
}

// Output rows per column block, sized so one block stays cache resident.
std::size_t rows_per_block(const ConvGeometry& g) {
  constexpr std::size_t kBlockDoubles = 1 << 17;  // 1 MiB
  const std::size_t per_row = std::max<std::size_t>(1, g.k() * g.ow);
  return std::clamp<std::size_t>(kBlockDoubles / per_row, 1, g.oh);
}

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void conv_forward_im2col(const ConvGeometry& g, const double* x, const double* w, const double* b,
                         double* y) {
  const std::size_t K = g.k(), P = g.p(), rows = rows_per_block(g);
  std::vector<double> col(K * rows * g.ow);
  ConstMapMat W(w, static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy0 = 0; oy0 < g.oh; oy0 += rows) {
      const std::size_t oy1 = std::min(g.oh, oy0 + rows);
      const auto cols = static_cast<Eigen::Index>((oy1 - oy0) * g.ow);
      im2col(x + n * g.c * g.h * g.w, g, oy0, oy1, col.data());
      ConstMapMat C(col.data(), static_cast<Eigen::Index>(K), cols);
      StridedMap Y(y + n * g.f * P + oy0 * g.ow, static_cast<Eigen::Index>(g.f), cols,
                   Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
      Y.noalias() = W * C;
    }
    if (b != nullptr) {
      for (std::size_t f = 0; f < g.f; ++f) {
        double* row = y + (n * g.f + f) * P;
        for (std::size_t q = 0; q < P; ++q) row[q] += b[f];
      }
    }
  }
}

void conv_backward_im2col(const ConvGeometry& g, const double* x, const double* w,
                          const double* dy, double* dx, double* dw, double* db) {
  const std::size_t K = g.k(), P = g.p(), rows = rows_per_block(g);
  std::vector<double> col(dw != nullptr ? K * rows * g.ow : 0);
  std::vector<double> dcol(dx != nullptr ? K * rows * g.ow : 0);
  ConstMapMat W(w, static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oy0 = 0; oy0 < g.oh; oy0 += rows) {
      const std::size_t oy1 = std::min(g.oh, oy0 + rows);
      const auto cols = static_cast<Eigen::Index>((oy1 - oy0) * g.ow);
      ConstStridedMap dY(dy + n * g.f * P + oy0 * g.ow, static_cast<Eigen::Index>(g.f), cols,
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
      if (dw != nullptr) {
        im2col(x + n * g.c * g.h * g.w, g, oy0, oy1, col.data());
        ConstMapMat C(col.data(), static_cast<Eigen::Index>(K), cols);
        MapMat dW(dw, static_cast<Eigen::Index>(g.f), static_cast<Eigen::Index>(K));
        dW.noalias() += dY * C.transpose();
      }
      if (dx != nullptr) {
        MapMat dC(dcol.data(), static_cast<Eigen::Index>(K), cols);
        dC.noalias() = W.transpose() * dY;
        col2im_add(dcol.data(), g, oy0, oy1, dx + n * g.c * g.h * g.w);
      }
    }
    if (db != nullptr) {
      for (std::size_t f = 0; f < g.f; ++f) {
        const double* row = dy + (n * g.f + f) * P;
        for (std::size_t q = 0; q < P; ++q) db[f] += row[q];
      }
    }
  }
}

// Reference implementation: one multiply-add per (output, tap).
template <typename Visit>
void for_each_tap(const ConvGeometry& g, Visit visit) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t f = 0; f < g.f; ++f)
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox)
          for (std::size_t ci = 0; ci < g.c; ++ci)
            for (std::size_t i = 0; i < g.kh; ++i) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                          static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                const std::size_t xi =
                    ((n * g.c + ci) * g.h + static_cast<std::size_t>(iy)) * g.w +
                    static_cast<std::size_t>(ix);
                const std::size_t wi = ((f * g.c + ci) * g.kh + i) * g.kw + j;
                const std::size_t yi = ((n * g.f + f) * g.oh + oy) * g.ow + ox;
                visit(xi, wi, yi);
              }
            }
}

void conv_forward_direct(const ConvGeometry& g, const double* x, const double* w, const double* b,
                         double* y) {
  const std::size_t P = g.p();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t f = 0; f < g.f; ++f)
      std::fill_n(y + (n * g.f + f) * P, P, b != nullptr ? b[f] : 0.0);
  for_each_tap(g, [&](std::size_t xi, std::size_t wi, std::size_t yi) { y[yi] += x[xi] * w[wi]; });
}

void conv_backward_direct(const ConvGeometry& g, const double* x, const double* w,
                          const double* dy, double* dx, double* dw, double* db) {
  for_each_tap(g, [&](std::size_t xi, std::size_t wi, std::size_t yi) {
    if (dx != nullptr) dx[xi] += w[wi] * dy[yi];
    if (dw != nullptr) dw[wi] += x[xi] * dy[yi];
  });
  if (db != nullptr) {
    const std::size_t P = g.p();
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t f = 0; f < g.f; ++f)
        for (std::size_t q = 0; q < P; ++q) db[f] += dy[(n * g.f + f) * P + q];
  }
}

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) {
    fail(ErrorCode::Format, "tensor blob truncated");
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    fail(ErrorCode::InvalidInput, "tensor data length " + std::to_string(values.size()) +
                                      " does not match shape " + shape_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({}, value, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) fail(ErrorCode::InvalidInput, "item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::grad() { return grad_buffer(*impl_); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Tape

Tape* Tape::active() noexcept { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

Tape::Scope::~Scope() { g_active_tape = previous_; }

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, BackwardFn backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    fail(ErrorCode::InvalidInput, "backward: loss must be scalar, got shape " +
                                      shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    fail(ErrorCode::InvalidInput, "backward: loss is not connected to any tensor requiring grad");
  }
  if (loss.is_leaf()) {
    grad_buffer(*loss.impl())[0] += 1.0;
    return;
  }
  bool found = false;
  for (Node& node : nodes_) {
    node.output->grad.assign(node.output->data.size(), 0.0);
    found = found || node.output == loss.impl();
  }
  if (!found) fail(ErrorCode::InvalidInput, "backward: loss was not recorded on this tape");
  loss.impl()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) {
    if (loss.defined() && loss.is_leaf() && loss.requires_grad() && loss.numel() == 1) {
      grad_buffer(*loss.impl())[0] += 1.0;
      return;
    }
    fail(ErrorCode::InvalidInput, "backward: no active tape");
  }
  g_active_tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor scale(const Tensor& a, double s) {
  require_defined(a, "scale");
  const bool tracked = tracking({&a});
  Tensor out = make_result(a.shape(), tracked);
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * x[i];
  if (tracked) {
    ImplPtr ai = a.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({ai}, out.impl(), [ai, oi, s]() {
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * oi->grad[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  const bool tracked = tracking({&a});
  Tensor out = make_result({}, tracked);
  double total = 0.0;
  for (double v : a.data()) total += v;
  out.data()[0] = total;
  if (tracked) {
    ImplPtr ai = a.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({ai}, out.impl(), [ai, oi]() {
      auto& ga = grad_buffer(*ai);
      const double g = oi->grad[0];
      for (double& v : ga) v += g;
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  require_defined(a, "relu");
  const bool tracked = tracking({&a});
  Tensor out = make_result(a.shape(), tracked);
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (tracked) {
    ImplPtr ai = a.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({ai}, out.impl(), [ai, oi]() {
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (ai->data[i] > 0.0) ga[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorCode::InvalidInput, "reshape: cannot view " + shape_string(a.shape()) + " as " +
                                      shape_string(shape));
  }
  const bool tracked = tracking({&a});
  Tensor out = make_result(std::move(shape), tracked);
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (tracked) {
    ImplPtr ai = a.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({ai}, out.impl(), [ai, oi]() {
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorCode::InvalidInput, "matmul: incompatible shapes " + shape_string(a.shape()) +
                                      " x " + shape_string(b.shape()));
  }
  const auto n = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto m = static_cast<Eigen::Index>(b.dim(1));
  const bool tracked = tracking({&a, &b});
  Tensor out = make_result({a.dim(0), b.dim(1)}, tracked);
  MapMat(out.data().data(), n, m).noalias() =
      ConstMapMat(a.data().data(), n, k) * ConstMapMat(b.data().data(), k, m);
  if (tracked) {
    ImplPtr ai = a.impl(), bi = b.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({ai, bi}, out.impl(), [ai, bi, oi, n, k, m]() {
      ConstMapMat dC(oi->grad.data(), n, m);
      if (ai->requires_grad) {
        MapMat(grad_buffer(*ai).data(), n, k).noalias() +=
            dC * ConstMapMat(bi->data.data(), k, m).transpose();
      }
      if (bi->requires_grad) {
        MapMat(grad_buffer(*bi).data(), k, m).noalias() +=
            ConstMapMat(ai->data.data(), n, k).transpose() * dC;
      }
    });
  }
  return out;
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  require_defined(x, "bias_add");
  require_defined(bias, "bias_add");
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    fail(ErrorCode::InvalidInput, "bias_add: incompatible shapes " + shape_string(x.shape()) +
                                      " + " + shape_string(bias.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const bool tracked = tracking({&x, &bias});
  Tensor out = make_result(x.shape(), tracked);
  auto o = out.data();
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xv[r * cols + c] + bv[c];
  if (tracked) {
    ImplPtr xi = x.impl(), bi = bias.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({xi, bi}, out.impl(), [xi, bi, oi, rows, cols]() {
      const auto& go = oi->grad;
      if (xi->requires_grad) {
        auto& gx = grad_buffer(*xi);
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (bi->requires_grad) {
        auto& gb = grad_buffer(*bi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += go[r * cols + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const Conv2dOptions& options) {
  const ConvGeometry g = conv_geometry(input, weight, bias, options);
  const bool tracked = tracking({&input, &weight, &bias});
  Tensor out = make_result({g.n, g.f, g.oh, g.ow}, tracked);
  const double* b = bias.defined() ? bias.data().data() : nullptr;
  if (options.algo == ConvAlgo::Im2col) {
    conv_forward_im2col(g, input.data().data(), weight.data().data(), b, out.data().data());
  } else {
    conv_forward_direct(g, input.data().data(), weight.data().data(), b, out.data().data());
  }
  if (tracked) {
    ImplPtr xi = input.impl(), wi = weight.impl(), bi = bias.impl();
    TensorImpl* oi = out.impl().get();
    std::vector<ImplPtr> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    const ConvAlgo algo = options.algo;
    g_active_tape->record(std::move(inputs), out.impl(), [xi, wi, bi, oi, g, algo]() {
      double* dx = xi->requires_grad ? grad_buffer(*xi).data() : nullptr;
      double* dw = wi->requires_grad ? grad_buffer(*wi).data() : nullptr;
      double* db = (bi && bi->requires_grad) ? grad_buffer(*bi).data() : nullptr;
      if (algo == ConvAlgo::Im2col) {
        conv_backward_im2col(g, xi->data.data(), wi->data.data(), oi->grad.data(), dx, dw, db);
      } else {
        conv_backward_direct(g, xi->data.data(), wi->data.data(), oi->grad.data(), dx, dw, db);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

BatchNormStats BatchNormStats::identity(std::size_t channels) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, Mode mode, const BatchNormOptions& options) {
  require_defined(input, "batchnorm2d");
  require_defined(gamma, "batchnorm2d gamma");
  require_defined(beta, "batchnorm2d beta");
  if (input.rank() != 4) fail(ErrorCode::InvalidInput, "batchnorm2d: expected [N,C,H,W] input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (N * HW == 0) fail(ErrorCode::InvalidInput, "batchnorm2d: empty batch");
  auto channel_ok = [C](const Tensor& t) { return t.defined() && t.rank() == 1 && t.dim(0) == C; };
  if (!channel_ok(gamma) || !channel_ok(beta) || !channel_ok(stats.running_mean) ||
      !channel_ok(stats.running_var)) {
    fail(ErrorCode::InvalidInput, "batchnorm2d: channel mismatch, input has " + std::to_string(C));
  }
  const double M = static_cast<double>(N * HW);
  const bool tracked = tracking({&input, &gamma, &beta});
  Tensor out = make_result(input.shape(), tracked);

  auto x = input.data();
  auto y = out.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(C);

  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * HW;
        for (std::size_t q = 0; q < HW; ++q) mean += p[q];
      }
      mean /= M;
      for (std::size_t n = 0; n < N; ++n) {
        const double* p = x.data() + (n * C + c) * HW;
        for (std::size_t q = 0; q < HW; ++q) var += (p[q] - mean) * (p[q] - mean);
      }
      var /= M;
      const double unbiased = M > 1.0 ? var * M / (M - 1.0) : var;
      auto rm = stats.running_mean.data();
      auto rv = stats.running_var.data();
      rm[c] = (1.0 - options.momentum) * rm[c] + options.momentum * mean;
      rv[c] = (1.0 - options.momentum) * rv[c] + options.momentum * unbiased;
    } else {
      mean = stats.running_mean.data()[c];
      var = stats.running_var.data()[c];
    }
    const double is = 1.0 / std::sqrt(var + options.eps);
    (*inv_std)[c] = is;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * C + c) * HW;
      for (std::size_t q = 0; q < HW; ++q) {
        const double h = (x[base + q] - mean) * is;
        (*xhat)[base + q] = h;
        y[base + q] = gm[c] * h + bt[c];
      }
    }
  }

  if (tracked) {
    ImplPtr xi = input.impl(), gi = gamma.impl(), bi = beta.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record(
        {xi, gi, bi}, out.impl(), [xi, gi, bi, oi, xhat, inv_std, N, C, HW, M, mode]() {
          const auto& dy = oi->grad;
          const auto& h = *xhat;
          double* dx = xi->requires_grad ? grad_buffer(*xi).data() : nullptr;
          double* dg = gi->requires_grad ? grad_buffer(*gi).data() : nullptr;
          double* db = bi->requires_grad ? grad_buffer(*bi).data() : nullptr;
          for (std::size_t c = 0; c < C; ++c) {
            double sum_dy = 0.0, sum_dy_h = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * HW;
              for (std::size_t q = 0; q < HW; ++q) {
                sum_dy += dy[base + q];
                sum_dy_h += dy[base + q] * h[base + q];
              }
            }
            if (dg != nullptr) dg[c] += sum_dy_h;
            if (db != nullptr) db[c] += sum_dy;
            if (dx == nullptr) continue;
            const double k = gi->data[c] * (*inv_std)[c];
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t base = (n * C + c) * HW;
              for (std::size_t q = 0; q < HW; ++q) {
                if (mode == Mode::Train) {
                  dx[base + q] += k * (dy[base + q] - sum_dy / M - h[base + q] * sum_dy_h / M);
                } else {
                  dx[base + q] += k * dy[base + q];
                }
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and loss

Tensor global_avg_pool(const Tensor& input) {
  require_defined(input, "global_avg_pool");
  if (input.rank() != 4 || input.dim(2) * input.dim(3) == 0) {
    fail(ErrorCode::InvalidInput, "global_avg_pool: expected non-empty [N,C,H,W] input");
  }
  const std::size_t NC = input.dim(0) * input.dim(1), HW = input.dim(2) * input.dim(3);
  const bool tracked = tracking({&input});
  Tensor out = make_result({input.dim(0), input.dim(1)}, tracked);
  auto x = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < NC; ++i) {
    double s = 0.0;
    for (std::size_t q = 0; q < HW; ++q) s += x[i * HW + q];
    o[i] = s / static_cast<double>(HW);
  }
  if (tracked) {
    ImplPtr xi = input.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({xi}, out.impl(), [xi, oi, NC, HW]() {
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < NC; ++i) {
        const double g = oi->grad[i] / static_cast<double>(HW);
        for (std::size_t q = 0; q < HW; ++q) gx[i * HW + q] += g;
      }
    });
  }
  return out;
}

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  require_defined(pred, "l1_loss");
  require_defined(target, "l1_loss");
  if (pred.rank() != 1 || target.rank() != 1 || pred.dim(0) != target.dim(0)) {
    fail(ErrorCode::InvalidInput, "l1_loss: length mismatch " + shape_string(pred.shape()) +
                                      " vs " + shape_string(target.shape()));
  }
  const std::size_t N = pred.dim(0);
  if (N == 0) fail(ErrorCode::InvalidInput, "l1_loss: empty input");
  const bool tracked = tracking({&pred, &target});
  Tensor out = make_result({}, tracked);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) total += std::abs(pred.data()[i] - target.data()[i]);
  out.data()[0] = total / static_cast<double>(N);
  if (tracked) {
    ImplPtr pi = pred.impl(), ti = target.impl();
    TensorImpl* oi = out.impl().get();
    g_active_tape->record({pi, ti}, out.impl(), [pi, ti, oi, N]() {
      const double g = oi->grad[0] / static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i) {
        const double d = pi->data[i] - ti->data[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (pi->requires_grad) grad_buffer(*pi)[i] += s * g;
        if (ti->requires_grad) grad_buffer(*ti)[i] -= s * g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void write_tensor(std::ostream& out, const Tensor& tensor) {
  require_defined(tensor, "write_tensor");
  put_u64(out, tensor.rank());
  for (std::size_t d : tensor.shape()) put_u64(out, d);
  for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

Tensor read_tensor(std::istream& in) {
  const std::uint64_t rank = get_u64(in);
  if (rank > 8) fail(ErrorCode::Format, "tensor blob has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u64(in);
  std::size_t count = 1;
  for (std::size_t d : shape) {
    if (d != 0 && count > (std::size_t{1} << 40) / d) {
      fail(ErrorCode::Format, "tensor blob shape too large: " + shape_string(shape));
    }
    count *= d;
  }
  std::vector<double> values(count);
  for (double& v : values) v = std::bit_cast<double>(get_u64(in));
  return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace thermo::ad
