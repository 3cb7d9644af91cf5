#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "tseg/error.hpp"
#include "tseg/nn.hpp"
#include "tseg/rng.hpp"
#include "tseg/tensor.hpp"

using namespace tseg;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double stddev = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Independent direct 2-D convolution over one channel-major image.
std::vector<double> direct_conv(const std::vector<double>& img, std::size_t ci, std::size_t h, std::size_t w,
                                const std::vector<double>& kernel, std::size_t co, std::size_t k) {
  const int pad = static_cast<int>(k / 2);
  std::vector<double> out(co * h * w, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const int sy = static_cast<int>(y + ky) - pad, sx = static_cast<int>(x + kx) - pad;
              if (sy < 0 || sx < 0 || sy >= static_cast<int>(h) || sx >= static_cast<int>(w)) continue;
              acc += img[(c * h + sy) * w + sx] * kernel[((o * ci + c) * k + ky) * k + kx];
            }
        out[(o * h + y) * w + x] = acc;
      }
  return out;
}

std::vector<double> hand_layer_norm(const std::vector<double>& x, std::size_t rows, std::size_t cols) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += x[i * cols + j];
    mu /= cols;
    for (std::size_t j = 0; j < cols; ++j) var += (x[i * cols + j] - mu) * (x[i * cols + j] - mu);
    var /= cols;
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = (x[i * cols + j] - mu) / std::sqrt(var + 1e-5);
  }
  return out;
}

void zero_out(Tensor t) {
  for (double& v : t.mutable_data()) v = 0.0;
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("matmul examples") {
  SUBCASE("identity leaves operand unchanged") {
    Rng rng(1);
    const Tensor x = random_tensor({3, 4}, rng, false);
    const Tensor id = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(to_vec(matmul(id, x)) == to_vec(x));
  }
  SUBCASE("hand arithmetic") {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from({2, 1}, {1, 1});
    const Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 1});
    CHECK(c.at(0) == 3.0);
    CHECK(c.at(1) == 7.0);
  }
  SUBCASE("zeros annihilate") {
    Rng rng(2);
    const Tensor c = matmul(Tensor::zeros({2, 3}), random_tensor({3, 5}, rng, false));
    for (double v : c.data()) CHECK(v == 0.0);
  }
  SUBCASE("inner extent mismatch") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
  }
  SUBCASE("backward reaches both operands") {
    Rng rng(3);
    const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    auto r = grad_check_params([&] { return sum(square(matmul(a, b))); }, {a, b});
    CHECK(r.max_relative_error < kGradTol);
  }
}

TEST_CASE("cross_attention examples") {
  Rng rng(4);
  SUBCASE("single key returns its value row") {
    const Tensor q = random_tensor({5, 3}, rng, false);
    const Tensor k = random_tensor({1, 3}, rng, false);
    const Tensor v = random_tensor({1, 3}, rng, false);
    const Tensor out = cross_attention(q, k, v);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(out.at(i * 3 + j) == doctest::Approx(v.at(j)).epsilon(1e-14));
  }
  SUBCASE("identical keys average the values") {
    const Tensor q = random_tensor({4, 2}, rng, false);
    const Tensor k = Tensor::from({3, 2}, {0.3, -1.2, 0.3, -1.2, 0.3, -1.2});
    const Tensor v = Tensor::from({3, 2}, {1, 2, 4, 8, 7, -1});
    const Tensor out = cross_attention(q, k, v);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(out.at(i * 2) == doctest::Approx(4.0).epsilon(1e-12));
      CHECK(out.at(i * 2 + 1) == doctest::Approx(3.0).epsilon(1e-12));
    }
  }
  SUBCASE("two queries, two keys against scalar softmax") {
    const Tensor q = Tensor::from({2, 2}, {1, 0, 0.5, 2});
    const Tensor k = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor v = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor out = cross_attention(q, k, v);
    const double s = 1.0 / std::sqrt(2.0);
    // query 0 scores (1*s, 0); query 1 scores (0.5*s, 2*s)
    const double w00 = std::exp(s) / (std::exp(s) + 1.0);
    const double w10 = std::exp(0.5 * s) / (std::exp(0.5 * s) + std::exp(2 * s));
    CHECK(out.at(0) == doctest::Approx(w00 * 1 + (1 - w00) * 3).epsilon(1e-12));
    CHECK(out.at(1) == doctest::Approx(w00 * 2 + (1 - w00) * 4).epsilon(1e-12));
    CHECK(out.at(2) == doctest::Approx(w10 * 1 + (1 - w10) * 3).epsilon(1e-12));
    CHECK(out.at(3) == doctest::Approx(w10 * 2 + (1 - w10) * 4).epsilon(1e-12));
  }
  SUBCASE("empty keys") {
    try {
      cross_attention(Tensor::zeros({2, 2}), Tensor(), Tensor());
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Dimension);
    }
  }
  SUBCASE("width mismatch") { CHECK_THROWS_AS(cross_attention(Tensor::zeros({2, 2}), Tensor::zeros({3, 3}), Tensor::zeros({3, 3})), Error); }
}

TEST_CASE("softmax rows sum to one and attention rows are convex") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor({6, 9}, rng, false, 4.0);
    const Tensor s = softmax_rows(a);
    for (std::size_t i = 0; i < 6; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 9; ++j) total += s.at(i * 9 + j);
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
    const Tensor q = random_tensor({4, 3}, rng, false, 3.0);
    const Tensor k = random_tensor({7, 3}, rng, false, 3.0);
    const Tensor v = random_tensor({7, 3}, rng, false);
    const Tensor out = cross_attention(q, k, v);
    for (std::size_t j = 0; j < 3; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < 7; ++r) {
        lo = std::min(lo, v.at(r * 3 + j));
        hi = std::max(hi, v.at(r * 3 + j));
      }
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(out.at(i * 3 + j) >= lo - 1e-12);
        CHECK(out.at(i * 3 + j) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("transformer_encoder_layer examples") {
  Rng rng(6);
  const std::size_t n = 5, d = 8;
  auto params = TransformerLayerParams::init(d, 2 * d, rng);

  SUBCASE("shape preserved") {
    const Tensor x = random_tensor({n, d}, rng, false);
    CHECK(transformer_encoder_layer(x, params).shape() == Shape{n, d});
  }
  SUBCASE("zero weights reduce to layer-norm composition") {
    std::vector<std::pair<std::string, Tensor>> all;
    collect("layer", params, all);
    for (auto& [name, t] : all) {
      if (name.find("norm") == std::string::npos) zero_out(t);
    }
    const Tensor x = random_tensor({n, d}, rng, false);
    const auto expected = hand_layer_norm(hand_layer_norm(to_vec(x), n, d), n, d);
    const Tensor out = transformer_encoder_layer(x, params);
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(out.at(i) == doctest::Approx(expected[i]).epsilon(1e-10));
  }
  SUBCASE("permutation equivariance") {
    const Tensor x = random_tensor({n, d}, rng, false);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> permuted(n * d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) permuted[i * d + j] = x.at(perm[i] * d + j);
    const Tensor out = transformer_encoder_layer(x, params);
    const Tensor out_p = transformer_encoder_layer(Tensor::from({n, d}, permuted), params);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) CHECK(out_p.at(i * d + j) == doctest::Approx(out.at(perm[i] * d + j)).epsilon(1e-10));
  }
  SUBCASE("gradient check") {
    const Tensor x = random_tensor({n, d}, rng);
    std::vector<std::pair<std::string, Tensor>> all;
    collect("layer", params, all);
    // A key bias shifts every score in a row equally, so softmax cancels it
    // and its gradient is exactly zero; a relative error there only measures
    // finite-difference roundoff.
    std::vector<Tensor> ts{x};
    for (auto& [name, t] : all)
      if (name != "layer.attention.key.bias") ts.push_back(t);
    const Tensor w = random_tensor({n, d}, rng, false);
    auto loss = [&] { return sum(mul(transformer_encoder_layer(x, params), w)); };
    auto r = grad_check_params(loss, ts);
    CHECK(r.max_relative_error < kGradTol);

    params.attention.key.bias.zero_grad();
    loss().backward();
    for (double g : params.attention.key.bias.grad()) CHECK(std::abs(g) < 1e-12);
  }
}

TEST_CASE("conv3x3_bn_relu examples") {
  Rng rng(7);
  SUBCASE("zero input and zero bias give zero output") {
    auto p = ConvBnReluParams::init(2, 3, rng);
    const Tensor out = conv3x3_bn_relu(Tensor::zeros({2, 4, 5}), p, false);
    CHECK(out.shape() == Shape{3, 4, 5});
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("hand kernel on a 1x3x3 input") {
    const std::vector<double> img{1, 2, 3, 4, 5, 6, 7, 8, 9};
    // center tap plus right neighbour
    const std::vector<double> kernel{0, 0, 0, 0, 1, 1, 0, 0, 0};
    const Tensor out = conv2d(Tensor::from({1, 3, 3}, img), Tensor::from({1, 1, 3, 3}, kernel), Tensor());
    const auto oracle = direct_conv(img, 1, 3, 3, kernel, 1, 3);
    const std::vector<double> by_hand{3, 5, 3, 9, 11, 6, 15, 17, 9};
    CHECK(oracle == by_hand);
    CHECK(to_vec(out) == by_hand);

    auto p = ConvBnReluParams::init(1, 1, rng);
    std::copy(kernel.begin(), kernel.end(), p.weight.mutable_data().begin());
    const Tensor act = conv3x3_bn_relu(Tensor::from({1, 3, 3}, img), p, false);
    for (std::size_t i = 0; i < 9; ++i) CHECK(act.at(i) == doctest::Approx(by_hand[i] / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  }
  SUBCASE("random conv matches direct convolution") {
    const Tensor x = random_tensor({2, 3, 5, 4}, rng, false);
    const Tensor w = random_tensor({4, 3, 3, 3}, rng, false);
    const Tensor y = conv2d(x, w, Tensor());
    for (std::size_t b = 0; b < 2; ++b) {
      std::vector<double> img(x.data().begin() + b * 60, x.data().begin() + (b + 1) * 60);
      const auto oracle = direct_conv(img, 3, 5, 4, to_vec(w), 4, 3);
      for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(y.at(b * 80 + i) == doctest::Approx(oracle[i]).epsilon(1e-12));
    }
  }
  SUBCASE("output never negative") {
    auto p = ConvBnReluParams::init(3, 4, rng);
    for (bool training : {true, false}) {
      const Tensor out = conv3x3_bn_relu(random_tensor({2, 3, 6, 6}, rng, false, 3.0), p, training);
      for (double v : out.data()) CHECK(v >= 0.0);
    }
  }
  SUBCASE("channel mismatch") {
    auto p = ConvBnReluParams::init(3, 4, rng);
    CHECK_THROWS_AS(conv3x3_bn_relu(Tensor::zeros({2, 4, 4}), p, false), Error);
  }
  SUBCASE("running statistics follow momentum 0.1") {
    auto p = ConvBnReluParams::init(1, 1, rng);
    for (double& v : p.weight.mutable_data()) v = 0.0;
    p.weight.mutable_data()[4] = 1.0;
    const Tensor x = Tensor::from({1, 1, 1, 2}, {1.0, 3.0});
    conv3x3_bn_relu(x, p, true);
    CHECK(p.stats.running_mean.at(0) == doctest::Approx(0.2));
    // unbiased variance of {1,3} is 2
    CHECK(p.stats.running_var.at(0) == doctest::Approx(0.9 + 0.2));
  }
  SUBCASE("gradient check in both modes") {
    auto p = ConvBnReluParams::init(2, 3, rng);
    const Tensor x = random_tensor({2, 2, 4, 4}, rng);
    const Tensor w = random_tensor({2, 3, 4, 4}, rng, false);
    for (bool training : {true, false}) {
      auto r = grad_check_params([&] { return sum(mul(conv3x3_bn_relu(x, p, training), w)); },
                                 {x, p.weight, p.bias, p.gamma, p.beta});
      CHECK(r.max_relative_error < kGradTol);
    }
  }
}

TEST_CASE("bilinear_upsample examples") {
  SUBCASE("constant field stays constant") {
    const Tensor out = bilinear_upsample_2x(Tensor::full({2, 3, 5}, 0.7));
    CHECK(out.shape() == Shape{2, 6, 10});
    for (double v : out.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  }
  SUBCASE("half-pixel row [0,1]") {
    const Tensor out = bilinear_upsample_2x(Tensor::from({1, 1, 2}, {0.0, 1.0}));
    CHECK(out.shape() == Shape{1, 2, 4});
    // sample positions (o + 0.5) / 2 - 0.5 = -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    const std::vector<double> row{0.0, 0.25, 0.75, 1.0};
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t i = 0; i < 4; ++i) CHECK(out.at(r * 4 + i) == doctest::Approx(row[i]));
  }
  SUBCASE("decoder resolution chain") {
    Tensor x = Tensor::zeros({1, 7, 7});
    std::vector<std::size_t> sizes;
    for (std::size_t f : {2, 2, 2, 4}) {
      x = bilinear_upsample(x, f);
      sizes.push_back(x.dim(1));
    }
    CHECK(sizes == std::vector<std::size_t>{14, 28, 56, 224});
  }
  SUBCASE("bounds preserved") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
      const Tensor x = random_tensor({2, 2, 3, 4}, rng, false);
      const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
      const Tensor y = bilinear_upsample(x, 1 + trial % 4);
      for (double v : y.data()) {
        CHECK(v >= *lo - 1e-12);
        CHECK(v <= *hi + 1e-12);
      }
    }
  }
  SUBCASE("gradient check") {
    Rng rng(9);
    const Tensor x = random_tensor({2, 3, 3}, rng);
    const Tensor w = random_tensor({2, 12, 12}, rng, false);
    auto r = grad_check([&](const Tensor& in) { return sum(mul(bilinear_upsample(in, 4), w)); }, x);
    CHECK(r.max_relative_error < kGradTol);
  }
}

TEST_CASE("softmax_cross_entropy examples") {
  SUBCASE("uniform logits give ln 2") {
    const std::vector<std::uint8_t> labels{0, 1, 1, 0, 1, 0};
    const Tensor loss = softmax_cross_entropy(Tensor::zeros({2, 2, 3}), labels);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("confident correct predictions approach zero") {
    const std::vector<std::uint8_t> labels{1, 0};
    const Tensor logits = Tensor::from({2, 1, 2}, {-40, 40, 40, -40});
    CHECK(softmax_cross_entropy(logits, labels).item() < 1e-15);
  }
  SUBCASE("single foreground pixel with p_fg = 0.8") {
    const std::vector<std::uint8_t> labels{1};
    const Tensor logits = Tensor::from({2, 1, 1}, {0.0, std::log(4.0)});
    CHECK(softmax_cross_entropy(logits, labels).item() == doctest::Approx(-std::log(0.8)).epsilon(1e-14));
    CHECK(-std::log(0.8) == doctest::Approx(0.2231).epsilon(1e-4));
  }
  SUBCASE("label outside {0,1}") {
    const std::vector<std::uint8_t> labels{2};
    try {
      softmax_cross_entropy(Tensor::zeros({2, 1, 1}), labels);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Label);
    }
  }
  SUBCASE("gradient check on a batch") {
    Rng rng(10);
    const Tensor logits = random_tensor({2, 2, 3, 3}, rng, true, 3.0);
    std::vector<std::uint8_t> labels(18);
    for (auto& l : labels) l = rng.uniform() < 0.5;
    auto r = grad_check([&](const Tensor& x) { return softmax_cross_entropy(x, labels); }, logits);
    CHECK(r.max_relative_error < kGradTol);
  }
}

TEST_CASE("adamw_step examples") {
  SUBCASE("zero gradient without decay is a fixed point") {
    const Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    auto state = AdamWState::init({p}, cfg);
    adamw_step({p}, {{0.0, 0.0, 0.0}}, state);
    CHECK(to_vec(p) == std::vector<double>{1.0, -2.0, 0.5});
  }
  SUBCASE("one step on a scalar matches the closed form") {
    const Tensor p = Tensor::from({1}, {2.0}, true);
    AdamWConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.weight_decay = 0.1;
    auto state = AdamWState::init({p}, cfg);
    adamw_step({p}, {{1.0}}, state);
    // m = 0.1, v = 0.001, bias-corrected both to 1
    const double expected = 2.0 * (1.0 - 1e-3 * 0.1) - 1e-3 * 1.0 / (1.0 + 1e-8);
    CHECK(p.at(0) == doctest::Approx(expected).epsilon(1e-15));
    CHECK(state.step == 1);
  }
  SUBCASE("identical tensors stay identical and repeat bitwise") {
    Rng rng(11);
    const Tensor a = random_tensor({4}, rng), b = a.clone();
    auto sa = AdamWState::init({a}, {});
    auto sb = AdamWState::init({b}, {});
    for (int i = 0; i < 5; ++i) {
      std::vector<double> g(4);
      for (double& x : g) x = rng.normal();
      adamw_step({a}, {g}, sa);
      adamw_step({b}, {g}, sb);
    }
    CHECK(to_vec(a) == to_vec(b));
    CHECK(sa.step == 5);
  }
  SUBCASE("moment buffers must match") {
    const Tensor p = Tensor::zeros({2}, true);
    auto state = AdamWState::init({Tensor::zeros({3})}, {});
    CHECK_THROWS_AS(adamw_step({p}, state), Error);
  }
}

TEST_CASE("grad_check examples") {
  SUBCASE("linear function has zero error") {
    Rng rng(12);
    auto r = grad_check([](const Tensor& x) { return sum(x); }, random_tensor({3, 3}, rng));
    CHECK(r.max_relative_error < 1e-9);
    CHECK(r.coordinates_checked == 9);
  }
  SUBCASE("x^2 at 3") {
    const Tensor x = Tensor::from({1}, {3.0}, true);
    auto r = grad_check([](const Tensor& t) { return square(t); }, x);
    CHECK(x.grad()[0] == 6.0);
    CHECK(r.max_relative_error < 1e-9);
  }
  SUBCASE("non-finite value") {
    const Tensor x = Tensor::from({1}, {0.0}, true);
    CHECK_THROWS_AS(grad_check([](const Tensor& t) { return scale(t, std::nan("")); }, x), Error);
  }
}

TEST_CASE("every differentiable kernel passes a seeded gradient check") {
  Rng rng(13);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({3, 4}, rng, false);
  auto weighted = [&](const Tensor& t) { return sum(mul(t, w)); };
  CHECK(grad_check_params([&] { return weighted(add(a, b)); }, {a, b}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(sub(a, b)); }, {a, b}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(mul(a, b)); }, {a, b}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(tanh(a)); }, {a}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(gelu(a)); }, {a}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(relu(a)); }, {a}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(softmax_rows(a)); }, {a}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return mean(square(a)); }, {a}).max_relative_error < kGradTol);
  CHECK(grad_check_params([&] { return weighted(reshape(transpose(reshape(a, {4, 3})), {3, 4})); }, {a})
            .max_relative_error < kGradTol);

  const Tensor gamma = random_tensor({4}, rng), beta = random_tensor({4}, rng);
  CHECK(grad_check_params([&] { return weighted(layer_norm_rows(a, gamma, beta)); }, {a, gamma, beta})
            .max_relative_error < kGradTol);

  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
  CHECK(grad_check_params([&] { return weighted(cross_attention(q, k, v)); }, {q, k, v}).max_relative_error <
        kGradTol);

  const Tensor x = random_tensor({2, 3}, rng), lw = random_tensor({3, 4}, rng), lb = random_tensor({4}, rng);
  const Tensor w2 = random_tensor({2, 4}, rng, false);
  CHECK(grad_check_params([&] { return sum(mul(linear(x, lw, lb), w2)); }, {x, lw, lb}).max_relative_error <
        kGradTol);

  const Tensor img = random_tensor({3, 4, 4}, rng);
  const Tensor wp = random_tensor({4, 12}, rng, false);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(patchify(t, 2), wp)); }, img).max_relative_error <
        kGradTol);

  const Tensor s1 = random_tensor({2, 3}, rng), s2 = random_tensor({2, 3}, rng);
  const Tensor ws = random_tensor({2, 3}, rng, false);
  CHECK(grad_check_params([&] { return sum(mul(select(stack({s1, s2}), 1), ws)); }, {s1, s2}).max_relative_error <
        kGradTol);

  const Tensor pw = random_tensor({2, 3, 1, 1}, rng), pb = random_tensor({2}, rng);
  const Tensor pin = random_tensor({3, 2, 2}, rng);
  const Tensor wpw = random_tensor({2, 2, 2}, rng, false);
  CHECK(grad_check_params([&] { return sum(mul(conv2d(pin, pw, pb), wpw)); }, {pin, pw, pb}).max_relative_error <
        kGradTol);
}

TEST_CASE("no-grad mode records nothing") {
  const Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const Tensor b = scale(a, 2.0);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("patchify ordering") {
  std::vector<double> v(2 * 4 * 4);
  std::iota(v.begin(), v.end(), 0.0);
  const Tensor p = patchify(Tensor::from({2, 4, 4}, v), 2);
  CHECK(p.shape() == Shape{4, 8});
  // grid cell (0,1): channel 0 rows 0-1, cols 2-3 then channel 1
  const std::vector<double> expected{2, 3, 6, 7, 18, 19, 22, 23};
  for (std::size_t i = 0; i < 8; ++i) CHECK(p.at(8 + i) == expected[i]);
}
