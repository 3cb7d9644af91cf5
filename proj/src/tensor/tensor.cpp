#include "tseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "kernels.hpp"
#include "tseg/error.hpp"

namespace tseg {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    fail(ErrorKind::Dimension, std::string(op) + ": expected rank " + std::to_string(rank) +
                                   ", got " + shape_str(a.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    fail(ErrorKind::Dimension, "tensor: shape " + shape_str(shape) + " holds " +
                                   std::to_string(shape_numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  }
  for (auto extent : shape) {
    if (extent == 0) fail(ErrorKind::Dimension, "tensor: zero extent in " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&)> backward) {
  Tensor out = make_leaf(std::move(shape), std::move(values), false);
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  auto* node = out.node();
  node->requires_grad = true;
  for (auto& t : inputs) {
    if (t.defined()) node->inputs.push_back(t.node_ptr());
  }
  node->backward = std::move(backward);
  return out;
}

std::vector<double>* grad_target(const Tensor& input) {
  if (!input.defined() || !input.requires_grad()) return nullptr;
  return &input.node()->grad_buffer();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    fail(ErrorKind::Dimension, "tensor: axis " + std::to_string(axis) + " out of range for " +
                                   shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::Dimension, "item: tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) fail(ErrorKind::Dimension, "backward: output must be a single value");
  if (!requires_grad()) return;

  // Iterative post-order DFS for a topological ordering.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.size() == node->data.size()) node->backward(node->grad);
  }
  for (double g : node_->grad) {
    if (!std::isfinite(g)) fail(ErrorKind::Numeric, "backward: non-finite gradient");
  }
}

Tensor Tensor::detach() const { return make_leaf(shape(), node_->data, false); }

Tensor Tensor::clone() const { return make_leaf(shape(), node_->data, requires_grad()); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) {
    for (const Tensor* t : {&a, &b}) {
      if (auto* gt = grad_target(*t)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gt)[i] += g[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = grad_target(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](const std::vector<double>& g) {
    const auto ad = a.data();
    const auto bd = b.data();
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bd[i];
    }
    if (auto* gb = grad_target(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_op(a.shape(), std::move(out), {a}, [a, factor](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * factor;
    }
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  return make_op(a.shape(), std::move(out), {a}, [a](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), {a}, [a](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      const auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (ad[i] > 0.0) (*ga)[i] += g[i];
      }
    }
  });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::tanh(v);
  auto result = make_op(a.shape(), out, {a}, {});
  if (result.requires_grad()) {
    result.node()->backward = [a, out = std::move(out)](const std::vector<double>& g) {
      if (auto* ga = grad_target(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - out[i] * out[i]);
      }
    };
  }
  return result;
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = ad[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  return make_op(a.shape(), std::move(out), {a}, [a](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      const auto ad = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = ad[i];
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        (*ga)[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_op({1}, {total}, {a}, [a](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (double& v : *ga) v += g[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    fail(ErrorKind::Dimension, "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_op(std::move(shape), std::move(out), {a}, [a](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = ad[i * cols + j];
  }
  return make_op({cols, rows}, std::move(out), {a}, [a, rows, cols](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) (*ga)[i * cols + j] += g[j * rows + i];
      }
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "stack: no tensors");
  const Shape& inner = parts.front().shape();
  const std::size_t n = parts.front().numel();
  std::vector<double> out;
  out.reserve(n * parts.size());
  for (const auto& p : parts) {
    if (p.shape() != inner) fail(ErrorKind::Dimension, "stack: mismatched shapes");
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return make_op(std::move(shape), std::move(out), parts, [parts, n](const std::vector<double>& g) {
    for (std::size_t b = 0; b < parts.size(); ++b) {
      if (auto* gp = grad_target(parts[b])) {
        for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[b * n + i];
      }
    }
  });
}

Tensor select(const Tensor& a, std::size_t index) {
  if (a.rank() < 2 || index >= a.dim(0)) fail(ErrorKind::Dimension, "select: index out of range");
  Shape inner(a.shape().begin() + 1, a.shape().end());
  const std::size_t n = shape_numel(inner);
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(index * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return make_op(std::move(inner), std::move(out), {a}, [a, index, n](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[index * n + i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorKind::Dimension, "matmul: inner extents differ " + shape_str(a.shape()) + " * " +
                                   shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return make_op({m, n}, std::move(out), {a, b}, [a, b, m, n, k](const std::vector<double>& g) {
    if (auto* ga = grad_target(a)) kernels::gemm_nt(m, k, n, g.data(), b.data().data(), ga->data());
    if (auto* gb = grad_target(b)) kernels::gemm_tn(k, n, m, a.data().data(), g.data(), gb->data());
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    fail(ErrorKind::Dimension, "linear: input " + shape_str(x.shape()) + " vs weight " +
                                   shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != n) fail(ErrorKind::Dimension, "linear: bias size mismatch");
  std::vector<double> out(m * n, 0.0);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bd.begin(), bd.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  kernels::gemm_nn(m, n, k, x.data().data(), w.data().data(), out.data());
  return make_op({m, n}, std::move(out), {x, w, bias}, [x, w, bias, m, n, k](const std::vector<double>& g) {
    if (auto* gx = grad_target(x)) kernels::gemm_nt(m, k, n, g.data(), w.data().data(), gx->data());
    if (auto* gw = grad_target(w)) kernels::gemm_tn(k, n, m, x.data().data(), g.data(), gw->data());
    if (auto* gbias = grad_target(bias)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*gbias)[j] += g[i * n + j];
      }
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  require_rank(a, 2, "softmax_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = ad.data() + i * cols;
    double* o = out.data() + i * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  auto result = make_op(a.shape(), out, {a}, {});
  if (result.requires_grad()) {
    result.node()->backward = [a, rows, cols, out = std::move(out)](const std::vector<double>& g) {
      if (auto* ga = grad_target(a)) {
        for (std::size_t i = 0; i < rows; ++i) {
          const double* y = out.data() + i * cols;
          const double* gy = g.data() + i * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
          for (std::size_t j = 0; j < cols; ++j) (*ga)[i * cols + j] += y[j] * (gy[j] - dot);
        }
      }
    };
  }
  return result;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (gamma.numel() != cols || beta.numel() != cols) {
    fail(ErrorKind::Dimension, "layer_norm_rows: affine parameters must have " + std::to_string(cols) + " entries");
  }
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = xd.data() + i * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += in[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(cols);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      xhat[i * cols + j] = (in[j] - mu) * inv_std[i];
      out[i * cols + j] = xhat[i * cols + j] * gd[j] + bd[j];
    }
  }
  auto result = make_op(x.shape(), std::move(out), {x, gamma, beta}, {});
  if (result.requires_grad()) {
    result.node()->backward = [x, gamma, beta, rows, cols, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](const std::vector<double>& g) {
      const auto gd = gamma.data();
      auto* gx = grad_target(x);
      auto* gg = grad_target(gamma);
      auto* gb = grad_target(beta);
      for (std::size_t i = 0; i < rows; ++i) {
        const double* gy = g.data() + i * cols;
        const double* xh = xhat.data() + i * cols;
        if (gg || gb) {
          for (std::size_t j = 0; j < cols; ++j) {
            if (gg) (*gg)[j] += gy[j] * xh[j];
            if (gb) (*gb)[j] += gy[j];
          }
        }
        if (gx) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = gy[j] * gd[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<double>(cols);
          mean_dxh_xh /= static_cast<double>(cols);
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = gy[j] * gd[j];
            (*gx)[i * cols + j] += inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      }
    };
  }
  return result;
}

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (!k.defined() || !v.defined()) fail(ErrorKind::Dimension, "cross_attention: empty key set");
  require_rank(q, 2, "cross_attention");
  require_rank(k, 2, "cross_attention");
  require_rank(v, 2, "cross_attention");
  if (k.dim(0) == 0 || k.numel() == 0) fail(ErrorKind::Dimension, "cross_attention: empty key set");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d) {
    fail(ErrorKind::Dimension, "cross_attention: feature widths differ " + shape_str(q.shape()) + ", " +
                                   shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (v.dim(0) != k.dim(0)) fail(ErrorKind::Dimension, "cross_attention: keys and values differ in count");
  const Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  return matmul(softmax_rows(scores), v);
}

}  // namespace tseg
