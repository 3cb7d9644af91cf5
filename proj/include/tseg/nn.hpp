#pragma once

// Composite layers built from tensor kernels: transformer encoder layer,
// projected attention and the decoder's conv-BN-ReLU unit.

#include <string>
#include <vector>

#include "tseg/rng.hpp"
#include "tseg/tensor.hpp"

namespace tseg {

/// Affine map x W + b with W stored [in, out].
struct LinearParams {
  Tensor weight;
  Tensor bias;

  static LinearParams init(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  static LayerNormParams init(std::size_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm_rows(x, gamma, beta); }
};

/// Query/key/value/output projections around single-head attention.
struct AttentionParams {
  LinearParams query, key, value, output;

  static AttentionParams init(std::size_t width, Rng& rng);
  Tensor operator()(const Tensor& queries, const Tensor& context) const;
};

struct TransformerLayerParams {
  AttentionParams attention;
  LayerNormParams norm1;
  LinearParams ffn_in;
  LinearParams ffn_out;
  LayerNormParams norm2;

  static TransformerLayerParams init(std::size_t width, std::size_t ffn_width, Rng& rng);
};

/// Post-norm encoder layer: x = LN(x + SelfAttn(x)); x = LN(x + FFN(x)), with
/// a GELU feed-forward. No positional term is added here.
Tensor transformer_encoder_layer(const Tensor& x, const TransformerLayerParams& params);

struct ConvBnReluParams {
  Tensor weight;  // [Co, Ci, 3, 3]
  Tensor bias;    // [Co]
  Tensor gamma;   // [Co]
  Tensor beta;    // [Co]
  BatchNormState stats;

  static ConvBnReluParams init(std::size_t in_channels, std::size_t out_channels, Rng& rng);
};

/// 3x3 convolution (padding 1), batch normalization, then max(0, .).
Tensor conv3x3_bn_relu(const Tensor& x, ConvBnReluParams& params, bool training);

/// Appends every tensor of a parameter block, prefixed by `prefix`.
void collect(const std::string& prefix, const LinearParams& p, std::vector<std::pair<std::string, Tensor>>& out);
void collect(const std::string& prefix, const LayerNormParams& p,
             std::vector<std::pair<std::string, Tensor>>& out);
void collect(const std::string& prefix, const AttentionParams& p,
             std::vector<std::pair<std::string, Tensor>>& out);
void collect(const std::string& prefix, const TransformerLayerParams& p,
             std::vector<std::pair<std::string, Tensor>>& out);
/// Trainable tensors only; running statistics go through `collect_buffers`.
void collect(const std::string& prefix, const ConvBnReluParams& p,
             std::vector<std::pair<std::string, Tensor>>& out);
void collect_buffers(const std::string& prefix, const ConvBnReluParams& p,
                     std::vector<std::pair<std::string, Tensor>>& out);

}  // namespace tseg
