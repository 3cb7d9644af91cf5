#pragma once

// Reverse-mode differentiable dense tensors of doubles.
//
// A Tensor is a shared handle to a graph node. Operations build the graph
// only while gradient recording is enabled and at least one input requires
// a gradient; backward() walks the graph in reverse topological order and
// accumulates into every reachable tensor that requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable access for optimizers and initializers. Does not touch the graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  /// Gradient buffer; empty when nothing has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  /// Seeds d(self)/d(self) = 1 and propagates. Self must hold one element.
  void backward() const;

  /// Same values, no history.
  Tensor detach() const;
  /// Deep copy with no history; requires_grad is carried over.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(const std::vector<double>&)>);
  friend Tensor make_leaf(Shape, std::vector<double>, bool);
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Receives this node's output gradient; adds into inputs' grads.
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Builds a result tensor. The backward closure is kept only when recording
/// is on and some input requires a gradient.
Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
               std::function<void(const std::vector<double>&)> backward);
Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad);

/// Accumulation target for an input's gradient, or nullptr if it needs none.
std::vector<double>* grad_target(const Tensor& input);

bool grad_enabled();

/// Disables graph recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Elementwise and reductions

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
/// tanh approximation of GELU.
Tensor gelu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank 2
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
/// Row i of the leading axis.
Tensor select(const Tensor& a, std::size_t index);

// ---------------------------------------------------------------------------
// Linear algebra and attention

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[n, in] * w[in, out] + bias[out]. bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
/// Row-wise softmax over the last axis of a rank-2 tensor.
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);
/// Single-head scaled dot-product attention softmax(q k^T / sqrt(d)) v.
Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// ---------------------------------------------------------------------------
// Image kernels. Accept [C, H, W] or [B, C, H, W]; rank is preserved.

/// Square kernel, stride 1, zero padding (k - 1) / 2. bias may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct BatchNormState {
  Tensor running_mean;  // [C], no grad
  Tensor running_var;   // [C], no grad
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization. Training mode normalizes with batch statistics
/// over (B, H, W) and updates the running averages in `state`; evaluation mode
/// uses the running averages.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool training);

/// Bilinear resize by an integer factor with half-pixel centers
/// (align_corners disabled).
Tensor bilinear_upsample(const Tensor& x, std::size_t factor);
inline Tensor bilinear_upsample_2x(const Tensor& x) { return bilinear_upsample(x, 2); }

/// Flattens non-overlapping patch x patch windows of a [C, H, W] image into
/// rows ordered by grid row then column; columns ordered (c, y, x).
Tensor patchify(const Tensor& image, std::size_t patch);

/// Mean two-class cross-entropy over every pixel. logits: [2, H, W] or
/// [B, 2, H, W] with channel 0 background and 1 foreground; labels holds B*H*W
/// values in {0, 1}.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels);

/// Foreground probability per pixel for two-class logits.
std::vector<double> foreground_probability(const Tensor& logits);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamWState init(const std::vector<Tensor>& params, AdamWConfig config);
};

/// One decoupled-weight-decay update using each parameter's accumulated
/// gradient (a parameter without gradient counts as zero gradient).
void adamw_step(const std::vector<Tensor>& params, AdamWState& state);

/// Explicit-gradient form: grads[i] must match params[i] in size.
void adamw_step(const std::vector<Tensor>& params,
                const std::vector<std::vector<double>>& grads, AdamWState& state);

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates_checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded sample of this many.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

/// Compares the analytic gradient of f at x against central differences.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           const GradCheckOptions& options = {});

/// Same comparison for a closure over several parameter tensors.
GradCheckResult grad_check_params(const std::function<Tensor()>& f,
                                  const std::vector<Tensor>& params,
                                  const GradCheckOptions& options = {});

}  // namespace tseg
