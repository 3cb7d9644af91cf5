#include <cmath>

#include "tseg/error.hpp"
#include "tseg/rng.hpp"
#include "tseg/tensor.hpp"

namespace tseg {

AdamWState AdamWState::init(const std::vector<Tensor>& params, AdamWConfig config) {
  AdamWState state;
  state.config = config;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.numel(), 0.0);
    state.second_moment.emplace_back(p.numel(), 0.0);
  }
  return state;
}

namespace {

void check_state(const std::vector<Tensor>& params, const AdamWState& state) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    fail(ErrorKind::Dimension, "adamw_step: state tracks " + std::to_string(state.first_moment.size()) +
                                   " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel() || state.second_moment[i].size() != params[i].numel()) {
      fail(ErrorKind::Dimension, "adamw_step: moment buffer " + std::to_string(i) + " does not match parameter " +
                                     shape_str(params[i].shape()));
    }
  }
}

void update_one(Tensor param, std::span<const double> grad, std::vector<double>& m, std::vector<double>& v,
                const AdamWConfig& c, double bias1, double bias2) {
  auto p = param.mutable_data();
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double g = grad.empty() ? 0.0 : grad[j];
    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
    const double m_hat = m[j] / bias1;
    const double v_hat = v[j] / bias2;
    p[j] = p[j] * decay - c.learning_rate * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

}  // namespace

void adamw_step(const std::vector<Tensor>& params, AdamWState& state) {
  check_state(params, state);
  ++state.step;
  const auto& c = state.config;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    update_one(params[i], params[i].grad(), state.first_moment[i], state.second_moment[i], c, bias1, bias2);
  }
}

void adamw_step(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                AdamWState& state) {
  check_state(params, state);
  if (grads.size() != params.size()) fail(ErrorKind::Dimension, "adamw_step: gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel()) {
      fail(ErrorKind::Dimension, "adamw_step: gradient " + std::to_string(i) + " has wrong size");
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    update_one(params[i], grads[i], state.first_moment[i], state.second_moment[i], c, bias1, bias2);
  }
}

// ---------------------------------------------------------------------------

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double value = f().item();
  if (!std::isfinite(value)) fail(ErrorKind::Numeric, "grad_check: function value is not finite");
  return value;
}

std::vector<std::size_t> coordinates(std::size_t n, const GradCheckOptions& options, Rng& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  if (options.max_coordinates == 0 || options.max_coordinates >= n) return all;
  rng.shuffle(all);
  all.resize(options.max_coordinates);
  return all;
}

}  // namespace

GradCheckResult grad_check_params(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                                  const GradCheckOptions& options) {
  if (options.eps <= 0.0) fail(ErrorKind::Numeric, "grad_check: eps must be positive");
  for (auto p : params) p.zero_grad();
  {
    const Tensor y = f();
    if (!std::isfinite(y.item())) fail(ErrorKind::Numeric, "grad_check: function value is not finite");
    y.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  GradCheckResult result;
  Rng rng(options.seed);
  std::size_t offset = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor p = params[t];
    auto values = p.mutable_data();
    for (std::size_t i : coordinates(values.size(), options, rng)) {
      const double original = values[i];
      values[i] = original + options.eps;
      const double plus = evaluate(f);
      values[i] = original - options.eps;
      const double minus = evaluate(f);
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.coordinates_checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_index = offset + i;
      }
    }
    offset += values.size();
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           const GradCheckOptions& options) {
  Tensor input = x;
  const bool had = input.requires_grad();
  input.set_requires_grad(true);
  auto result = grad_check_params([&] { return f(input); }, {input}, options);
  input.set_requires_grad(had);
  return result;
}

}  // namespace tseg
