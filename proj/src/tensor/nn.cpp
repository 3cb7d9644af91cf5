#include "tseg/nn.hpp"

#include <cmath>

#include "tseg/error.hpp"

namespace tseg {

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.normal() * stddev;
  return Tensor::from(std::move(shape), std::move(values), true);
}

}  // namespace

LinearParams LinearParams::init(std::size_t in, std::size_t out, Rng& rng, double gain) {
  return {normal_tensor({in, out}, gain / std::sqrt(static_cast<double>(in)), rng), Tensor::zeros({out}, true)};
}

LayerNormParams LayerNormParams::init(std::size_t width) {
  return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

AttentionParams AttentionParams::init(std::size_t width, Rng& rng) {
  AttentionParams p;
  p.query = LinearParams::init(width, width, rng);
  p.key = LinearParams::init(width, width, rng);
  p.value = LinearParams::init(width, width, rng);
  p.output = LinearParams::init(width, width, rng);
  return p;
}

Tensor AttentionParams::operator()(const Tensor& queries, const Tensor& context) const {
  return output(cross_attention(query(queries), key(context), value(context)));
}

TransformerLayerParams TransformerLayerParams::init(std::size_t width, std::size_t ffn_width, Rng& rng) {
  TransformerLayerParams p;
  p.attention = AttentionParams::init(width, rng);
  p.norm1 = LayerNormParams::init(width);
  p.ffn_in = LinearParams::init(width, ffn_width, rng);
  p.ffn_out = LinearParams::init(ffn_width, width, rng);
  p.norm2 = LayerNormParams::init(width);
  return p;
}

Tensor transformer_encoder_layer(const Tensor& x, const TransformerLayerParams& params) {
  if (x.rank() != 2) fail(ErrorKind::Dimension, "transformer_encoder_layer: expected [N, d]");
  const Tensor attended = params.norm1(add(x, params.attention(x, x)));
  const Tensor hidden = params.ffn_out(gelu(params.ffn_in(attended)));
  Tensor out = params.norm2(add(attended, hidden));
  for (double v : out.data()) {
    if (!std::isfinite(v)) fail(ErrorKind::Numeric, "transformer_encoder_layer: non-finite activation");
  }
  return out;
}

ConvBnReluParams ConvBnReluParams::init(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
  ConvBnReluParams p;
  p.weight = normal_tensor({out_channels, in_channels, 3, 3},
                           std::sqrt(2.0 / static_cast<double>(in_channels * 9)), rng);
  p.bias = Tensor::zeros({out_channels}, true);
  p.gamma = Tensor::full({out_channels}, 1.0, true);
  p.beta = Tensor::zeros({out_channels}, true);
  p.stats.running_mean = Tensor::zeros({out_channels});
  p.stats.running_var = Tensor::full({out_channels}, 1.0);
  return p;
}

Tensor conv3x3_bn_relu(const Tensor& x, ConvBnReluParams& params, bool training) {
  return relu(batch_norm2d(conv2d(x, params.weight, params.bias), params.gamma, params.beta, params.stats,
                           training));
}

void collect(const std::string& prefix, const LinearParams& p, std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(prefix + ".weight", p.weight);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect(const std::string& prefix, const LayerNormParams& p, std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

void collect(const std::string& prefix, const AttentionParams& p, std::vector<std::pair<std::string, Tensor>>& out) {
  collect(prefix + ".query", p.query, out);
  collect(prefix + ".key", p.key, out);
  collect(prefix + ".value", p.value, out);
  collect(prefix + ".output", p.output, out);
}

void collect(const std::string& prefix, const TransformerLayerParams& p,
             std::vector<std::pair<std::string, Tensor>>& out) {
  collect(prefix + ".attention", p.attention, out);
  collect(prefix + ".norm1", p.norm1, out);
  collect(prefix + ".ffn_in", p.ffn_in, out);
  collect(prefix + ".ffn_out", p.ffn_out, out);
  collect(prefix + ".norm2", p.norm2, out);
}

void collect(const std::string& prefix, const ConvBnReluParams& p, std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(prefix + ".conv.weight", p.weight);
  out.emplace_back(prefix + ".conv.bias", p.bias);
  out.emplace_back(prefix + ".bn.gamma", p.gamma);
  out.emplace_back(prefix + ".bn.beta", p.beta);
}

void collect_buffers(const std::string& prefix, const ConvBnReluParams& p,
                     std::vector<std::pair<std::string, Tensor>>& out) {
  out.emplace_back(prefix + ".bn.running_mean", p.stats.running_mean);
  out.emplace_back(prefix + ".bn.running_var", p.stats.running_var);
}

}  // namespace tseg
