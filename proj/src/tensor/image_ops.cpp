#include <algorithm>
#include <cmath>

#include "kernels.hpp"
#include "tseg/error.hpp"
#include "tseg/tensor.hpp"

namespace tseg {

namespace {

struct Dims4 {
  std::size_t batch, channels, height, width;
  bool batched;
};

Dims4 image_dims(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  fail(ErrorKind::Dimension, std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
}

Shape image_shape(const Dims4& d, std::size_t channels, std::size_t height, std::size_t width) {
  if (d.batched) return {d.batch, channels, height, width};
  return {channels, height, width};
}

// cols[(c*k + ky)*k + kx, y*W + x] = x[c, y + ky - pad, x + kx - pad]
void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            double* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          double* out = row + y * w;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + w, 0.0);
            continue;
          }
          const double* src = img + (c * h + static_cast<std::size_t>(sy)) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
            out[x] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : src[sx];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                double* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst = img + (c * h + static_cast<std::size_t>(sy)) * w;
          const double* in = row + y * w;
          for (std::size_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) dst[sx] += in[x];
          }
        }
      }
    }
  }
}

struct Interp {
  std::size_t lo, hi;
  double w_hi;
};

// Half-pixel centers: src = (dst + 0.5) / factor - 0.5, clamped at 0.
std::vector<Interp> interp_table(std::size_t in, std::size_t out, double factor) {
  std::vector<Interp> table(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : lo;
    table[o] = {lo, hi, src - static_cast<double>(lo)};
    if (hi == lo) table[o].w_hi = 0.0;
  }
  return table;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Dims4 d = image_dims(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
    fail(ErrorKind::Dimension, "conv2d: weight must be [Co,Ci,k,k] with odd k, got " + shape_str(weight.shape()));
  }
  const std::size_t co = weight.dim(0), ci = weight.dim(1), k = weight.dim(2);
  if (ci != d.channels) {
    fail(ErrorKind::Dimension, "conv2d: input has " + std::to_string(d.channels) + " channels, kernel expects " +
                                   std::to_string(ci));
  }
  if (bias.defined() && bias.numel() != co) fail(ErrorKind::Dimension, "conv2d: bias size mismatch");
  const std::size_t hw = d.height * d.width;
  const std::size_t patch = ci * k * k;
  const bool pointwise = k == 1;

  std::vector<double> cols;
  if (!pointwise) cols.resize(d.batch * patch * hw);
  std::vector<double> out(d.batch * co * hw, 0.0);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* img = xd + b * ci * hw;
    const double* src = img;
    if (!pointwise) {
      im2col(img, ci, d.height, d.width, k, cols.data() + b * patch * hw);
      src = cols.data() + b * patch * hw;
    }
    double* dst = out.data() + b * co * hw;
    if (bias.defined()) {
      for (std::size_t c = 0; c < co; ++c) std::fill(dst + c * hw, dst + (c + 1) * hw, bias.data()[c]);
    }
    kernels::gemm_nn(co, hw, patch, wd, src, dst);
  }

  auto result = make_op(image_shape(d, co, d.height, d.width), std::move(out), {x, weight, bias}, {});
  if (result.requires_grad()) {
    result.node()->backward = [x, weight, bias, d, co, ci, k, hw, patch, pointwise,
                               cols = std::move(cols)](const std::vector<double>& g) {
      auto* gx = grad_target(x);
      auto* gw = grad_target(weight);
      auto* gb = grad_target(bias);
      std::vector<double> dcols(pointwise ? 0 : patch * hw);
      for (std::size_t b = 0; b < d.batch; ++b) {
        const double* gout = g.data() + b * co * hw;
        const double* src = pointwise ? x.data().data() + b * ci * hw : cols.data() + b * patch * hw;
        if (gw) kernels::gemm_nt(co, patch, hw, gout, src, gw->data());
        if (gb) {
          for (std::size_t c = 0; c < co; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += gout[c * hw + i];
            (*gb)[c] += acc;
          }
        }
        if (gx) {
          if (pointwise) {
            kernels::gemm_tn(patch, hw, co, weight.data().data(), gout, gx->data() + b * ci * hw);
          } else {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            kernels::gemm_tn(patch, hw, co, weight.data().data(), gout, dcols.data());
            col2im_add(dcols.data(), ci, d.height, d.width, k, gx->data() + b * ci * hw);
          }
        }
      }
    };
  }
  return result;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                    bool training) {
  const Dims4 d = image_dims(x, "batch_norm2d");
  const std::size_t c_count = d.channels, hw = d.height * d.width;
  if (gamma.numel() != c_count || beta.numel() != c_count || state.running_mean.numel() != c_count ||
      state.running_var.numel() != c_count) {
    fail(ErrorKind::Dimension, "batch_norm2d: parameter sizes must equal channel count " + std::to_string(c_count));
  }
  const double count = static_cast<double>(d.batch * hw);
  const double* xd = x.data().data();
  std::vector<double> mu(c_count), inv_std(c_count);
  if (training) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < c_count; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < d.batch; ++b) {
        const double* p = xd + (b * c_count + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0.0;
      for (std::size_t b = 0; b < d.batch; ++b) {
        const double* p = xd + (b * c_count + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double biased = v / count;
      const double unbiased = count > 1.0 ? v / (count - 1.0) : biased;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(biased + state.eps);
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < c_count; ++c) {
      mu[c] = state.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var.data()[c] + state.eps);
    }
  }

  std::vector<double> xhat(x.numel());
  std::vector<double> out(x.numel());
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < c_count; ++c) {
      const std::size_t base = (b * c_count + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (xd[base + i] - mu[c]) * inv_std[c];
        out[base + i] = xhat[base + i] * gd[c] + bd[c];
      }
    }
  }

  auto result = make_op(x.shape(), std::move(out), {x, gamma, beta}, {});
  if (result.requires_grad()) {
    result.node()->backward = [x, gamma, beta, d, c_count, hw, count, training, xhat = std::move(xhat),
                               inv_std = std::move(inv_std)](const std::vector<double>& g) {
      auto* gx = grad_target(x);
      auto* gg = grad_target(gamma);
      auto* gb = grad_target(beta);
      const auto gd = gamma.data();
      for (std::size_t c = 0; c < c_count; ++c) {
        double sum_g = 0.0, sum_g_xhat = 0.0;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const std::size_t base = (b * c_count + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sum_g += g[base + i];
            sum_g_xhat += g[base + i] * xhat[base + i];
          }
        }
        if (gg) (*gg)[c] += sum_g_xhat;
        if (gb) (*gb)[c] += sum_g;
        if (!gx) continue;
        const double scale_c = gd[c] * inv_std[c];
        for (std::size_t b = 0; b < d.batch; ++b) {
          const std::size_t base = (b * c_count + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            if (training) {
              (*gx)[base + i] +=
                  scale_c * (g[base + i] - sum_g / count - xhat[base + i] * sum_g_xhat / count);
            } else {
              (*gx)[base + i] += scale_c * g[base + i];
            }
          }
        }
      }
    };
  }
  return result;
}

Tensor bilinear_upsample(const Tensor& x, std::size_t factor) {
  const Dims4 d = image_dims(x, "bilinear_upsample");
  if (factor == 0) fail(ErrorKind::Dimension, "bilinear_upsample: factor must be positive");
  const std::size_t oh = d.height * factor, ow = d.width * factor;
  const auto ty = interp_table(d.height, oh, static_cast<double>(factor));
  const auto tx = interp_table(d.width, ow, static_cast<double>(factor));
  const std::size_t planes = d.batch * d.channels;
  const std::size_t in_hw = d.height * d.width, out_hw = oh * ow;
  std::vector<double> out(planes * out_hw);
  const double* xd = x.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xd + p * in_hw;
    double* dst = out.data() + p * out_hw;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const Interp& iy = ty[oy];
      const double* r0 = src + iy.lo * d.width;
      const double* r1 = src + iy.hi * d.width;
      const double wy1 = iy.w_hi, wy0 = 1.0 - wy1;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Interp& ix = tx[ox];
        const double wx1 = ix.w_hi, wx0 = 1.0 - wx1;
        dst[oy * ow + ox] = wy0 * (wx0 * r0[ix.lo] + wx1 * r0[ix.hi]) + wy1 * (wx0 * r1[ix.lo] + wx1 * r1[ix.hi]);
      }
    }
  }
  return make_op(image_shape(d, d.channels, oh, ow), std::move(out), {x},
                 [x, d, ty, tx, planes, in_hw, out_hw, ow, oh](const std::vector<double>& g) {
                   auto* gx = grad_target(x);
                   if (!gx) return;
                   for (std::size_t p = 0; p < planes; ++p) {
                     double* dst = gx->data() + p * in_hw;
                     const double* gsrc = g.data() + p * out_hw;
                     for (std::size_t oy = 0; oy < oh; ++oy) {
                       const Interp& iy = ty[oy];
                       double* r0 = dst + iy.lo * d.width;
                       double* r1 = dst + iy.hi * d.width;
                       const double wy1 = iy.w_hi, wy0 = 1.0 - wy1;
                       for (std::size_t ox = 0; ox < ow; ++ox) {
                         const Interp& ix = tx[ox];
                         const double wx1 = ix.w_hi, wx0 = 1.0 - wx1;
                         const double gv = gsrc[oy * ow + ox];
                         r0[ix.lo] += gv * wy0 * wx0;
                         r0[ix.hi] += gv * wy0 * wx1;
                         r1[ix.lo] += gv * wy1 * wx0;
                         r1[ix.hi] += gv * wy1 * wx1;
                       }
                     }
                   }
                 });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) fail(ErrorKind::Dimension, "patchify: expected [C,H,W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    fail(ErrorKind::Config, "patchify: image " + shape_str(image.shape()) + " not divisible by patch " +
                                std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t row_len = c * patch * patch;
  std::vector<std::size_t> index(gh * gw * row_len);
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      std::size_t* row = index.data() + (gy * gw + gx) * row_len;
      std::size_t j = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < patch; ++y) {
          for (std::size_t x = 0; x < patch; ++x) {
            row[j++] = (ch * h + gy * patch + y) * w + gx * patch + x;
          }
        }
      }
    }
  }
  std::vector<double> out(index.size());
  const auto xd = image.data();
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = xd[index[i]];
  return make_op({gh * gw, row_len}, std::move(out), {image}, [image, index](const std::vector<double>& g) {
    if (auto* gi = grad_target(image)) {
      for (std::size_t i = 0; i < index.size(); ++i) (*gi)[index[i]] += g[i];
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels) {
  const Dims4 d = image_dims(logits, "softmax_cross_entropy");
  if (d.channels != 2) fail(ErrorKind::Dimension, "softmax_cross_entropy: expected two logit channels");
  const std::size_t hw = d.height * d.width;
  if (labels.size() != d.batch * hw) {
    fail(ErrorKind::Dimension, "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                   std::to_string(d.batch * hw) + " pixels");
  }
  for (auto l : labels) {
    if (l > 1) fail(ErrorKind::Label, "softmax_cross_entropy: label " + std::to_string(l) + " outside {0,1}");
  }
  const double* ld = logits.data().data();
  const double n = static_cast<double>(d.batch * hw);
  // Extended-precision accumulation keeps finite-difference checks of the
  // mean loss above summation noise.
  long double total = 0.0L;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* bg = ld + b * 2 * hw;
    const double* fg = bg + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const double m = std::max(bg[i], fg[i]);
      const double chosen = labels[b * hw + i] ? fg[i] : bg[i];
      total += (m - chosen) + std::log1p(std::exp(-std::abs(bg[i] - fg[i])));
    }
  }
  std::vector<std::uint8_t> kept(labels.begin(), labels.end());
  return make_op({1}, {static_cast<double>(total / n)}, {logits}, [logits, d, hw, n, kept = std::move(kept)](const std::vector<double>& g) {
    auto* gl = grad_target(logits);
    if (!gl) return;
    const double* ld = logits.data().data();
    for (std::size_t b = 0; b < d.batch; ++b) {
      const double* bg = ld + b * 2 * hw;
      const double* fg = bg + hw;
      double* gbg = gl->data() + b * 2 * hw;
      double* gfg = gbg + hw;
      for (std::size_t i = 0; i < hw; ++i) {
        // p_fg = sigmoid(fg - bg)
        const double z = fg[i] - bg[i];
        const double p_fg = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        const double y = kept[b * hw + i];
        const double dfg = (p_fg - y) * g[0] / n;
        gfg[i] += dfg;
        gbg[i] -= dfg;
      }
    }
  });
}

std::vector<double> foreground_probability(const Tensor& logits) {
  const Dims4 d = image_dims(logits, "foreground_probability");
  if (d.channels != 2) fail(ErrorKind::Dimension, "foreground_probability: expected two logit channels");
  const std::size_t hw = d.height * d.width;
  std::vector<double> out(d.batch * hw);
  const double* ld = logits.data().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* bg = ld + b * 2 * hw;
    const double* fg = bg + hw;
    for (std::size_t i = 0; i < hw; ++i) {
      const double z = fg[i] - bg[i];
      out[b * hw + i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
  }
  return out;
}

}  // namespace tseg
