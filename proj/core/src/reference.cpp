#include "involution/reference.hpp"

#include <cmath>
#include <vector>

namespace involution::reference {

namespace {

std::size_t out_extent(std::size_t in, const Window& w) {
  return (in + 2 * w.padding - w.dilation * (w.kernel - 1) - 1) / w.stride + 1;
}

// x[b, c, i, j] with zero outside the image; i, j are padded coordinates.
double padded_at(const Tensor& x, std::size_t b, std::size_t c, std::ptrdiff_t i, std::ptrdiff_t j) {
  const auto H = static_cast<std::ptrdiff_t>(x.dim(2)), W = static_cast<std::ptrdiff_t>(x.dim(3));
  if (i < 0 || j < 0 || i >= H || j >= W) return 0.0;
  return x.at({b, c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)});
}

std::ptrdiff_t tap_row(std::size_t out, std::size_t k, const Window& w) {
  return static_cast<std::ptrdiff_t>(out * w.stride + k * w.dilation) - static_cast<std::ptrdiff_t>(w.padding);
}

Tensor mean_pool(const Tensor& x, std::size_t s) {
  const std::size_t B = x.dim(0), C = x.dim(1), Ho = x.dim(2) / s, Wo = x.dim(3) / s;
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u < s; ++u)
            for (std::size_t v = 0; v < s; ++v) acc += x.at({b, c, i * s + u, j * s + v});
          out.at({b, c, i, j}) = acc / static_cast<double>(s * s);
        }
  return out;
}

// Per-channel statistics of y over (B, H, W) for train mode, otherwise the
// running estimates.
void bn_statistics(const Tensor& y, const BatchNormState& bn, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t B = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    if (bn.mode == BnMode::kEval) {
      mean[c] = bn.running_mean[c];
      var[c] = bn.running_var[c];
      continue;
    }
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) acc += y.at({b, c, i, j});
    mean[c] = acc / static_cast<double>(B * H * W);
    double sq = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) sq += (y.at({b, c, i, j}) - mean[c]) * (y.at({b, c, i, j}) - mean[c]);
    var[c] = sq / static_cast<double>(B * H * W);
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor* bias, const Window& w, std::size_t groups) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = filters.dim(0), K = w.kernel;
  const std::size_t Ho = out_extent(x.dim(2), w), Wo = out_extent(x.dim(3), w);
  const std::size_t cin_g = Ci / groups, cout_g = Co / groups;
  Tensor out = Tensor::zeros({B, Co, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          const std::size_t g = o / cout_g;
          for (std::size_t c = 0; c < cin_g; ++c)
            for (std::size_t u = 0; u < K; ++u)
              for (std::size_t v = 0; v < K; ++v) {
                acc += filters.at({o, c, u, v}) * padded_at(x, b, g * cin_g + c, tap_row(i, u, w), tap_row(j, v, w));
              }
          out.at({b, o, i, j}) = acc;
        }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& filters, const Window& w) {
  const std::size_t B = x.dim(0), C = x.dim(1), K = w.kernel;
  const std::size_t Ho = out_extent(x.dim(2), w), Wo = out_extent(x.dim(3), w);
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u < K; ++u)
            for (std::size_t v = 0; v < K; ++v)
              acc += filters.at({c, 0, u, v}) * padded_at(x, b, c, tap_row(i, u, w), tap_row(j, v, w));
          out.at({b, c, i, j}) = acc;
        }
  return out;
}

Tensor kernel_generate(const Tensor& x, const InvolutionSpec& spec) {
  const InvolutionConfig& cfg = spec.config;
  const Tensor p = cfg.stride > 1 ? mean_pool(x, cfg.stride) : x;
  const std::size_t B = p.dim(0), C = p.dim(1), H = p.dim(2), W = p.dim(3);
  const std::size_t G = cfg.groups, KK = cfg.taps();

  // Hidden code per pixel: W0 x, normalized, rectified; or x itself.
  Tensor hidden = p;
  if (cfg.form == KernelForm::kBottleneck) {
    const Tensor& w0 = spec.reduce->value;
    const std::size_t R = w0.dim(0);
    Tensor y = Tensor::zeros({B, R, H, W});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t r = 0; r < R; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += w0.at({r, c}) * p.at({b, c, i, j});
            y.at({b, r, i, j}) = acc;
          }
    std::vector<double> mean, var;
    bn_statistics(y, *spec.bn, mean, var);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            const double z = (y.at({b, r, i, j}) - mean[r]) / std::sqrt(var[r] + spec.bn->eps) *
                                 spec.bn->gamma.value[r] +
                             spec.bn->beta.value[r];
            y.at({b, r, i, j}) = z > 0.0 ? z : 0.0;
          }
    hidden = y;
  }

  const Tensor& w1 = spec.span.value;
  const std::size_t D = hidden.dim(1);
  Tensor kernel = Tensor::zeros({B, G, KK, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t t = 0; t < KK; ++t) {
            const std::size_t row = g * KK + t;
            double acc = spec.span_bias.value[row];
            for (std::size_t d = 0; d < D; ++d) acc += w1.at({row, d}) * hidden.at({b, d, i, j});
            kernel.at({b, g, t, i, j}) = acc;
          }
        if (cfg.softmax_kernel) {
          for (std::size_t g = 0; g < G; ++g) {
            double mx = kernel.at({b, g, 0, i, j});
            for (std::size_t t = 1; t < KK; ++t) mx = std::max(mx, kernel.at({b, g, t, i, j}));
            double z = 0.0;
            for (std::size_t t = 0; t < KK; ++t) z += std::exp(kernel.at({b, g, t, i, j}) - mx);
            for (std::size_t t = 0; t < KK; ++t) kernel.at({b, g, t, i, j}) = std::exp(kernel.at({b, g, t, i, j}) - mx) / z;
          }
        }
      }
  return kernel;
}

Tensor involution_mac(const Tensor& x, const Tensor& kernel, const Window& w) {
  const std::size_t B = x.dim(0), C = x.dim(1), G = kernel.dim(1), K = w.kernel;
  const std::size_t Ho = out_extent(x.dim(2), w), Wo = out_extent(x.dim(3), w);
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t g = c * G / C;
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t u = 0; u < K; ++u)
            for (std::size_t v = 0; v < K; ++v)
              acc += kernel.at({b, g, u * K + v, i, j}) * padded_at(x, b, c, tap_row(i, u, w), tap_row(j, v, w));
          out.at({b, c, i, j}) = acc;
        }
    }
  return out;
}

Tensor involution(const Tensor& x, const InvolutionSpec& spec) {
  return involution_mac(x, kernel_generate(x, spec), spec.config.window());
}

Tensor local_self_attention(const Tensor& x, const AttentionSpec& spec) {
  const AttentionConfig& cfg = spec.config;
  const Window w = cfg.unfold_window();
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = cfg.window, Hn = cfg.heads;
  const std::size_t Ch = C / Hn;
  const std::size_t Ho = out_extent(H, w), Wo = out_extent(W, w);
  const Tensor xq = cfg.stride > 1 ? mean_pool(x, cfg.stride) : x;

  auto project = [C](const Tensor& src, const Tensor& m) {
    Tensor y = Tensor::zeros(src.shape());
    for (std::size_t b = 0; b < src.dim(0); ++b)
      for (std::size_t i = 0; i < src.dim(2); ++i)
        for (std::size_t j = 0; j < src.dim(3); ++j)
          for (std::size_t o = 0; o < C; ++o) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += m.at({o, c}) * src.at({b, c, i, j});
            y.at({b, o, i, j}) = acc;
          }
    return y;
  };
  const Tensor queries = project(xq, spec.query.value);
  const Tensor values = project(x, spec.value.value);
  const Tensor keys = cfg.mode == AttentionMode::kContent ? project(x, spec.key.value) : Tensor::zeros(x.shape());

  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        std::vector<double> q(C);
        for (std::size_t c = 0; c < C; ++c) q[c] = queries.at({b, c, i, j});
        // affinity[h][tap]
        std::vector<std::vector<double>> aff(Hn, std::vector<double>(K * K, 0.0));
        std::vector<std::vector<double>> vals(K * K, std::vector<double>(C, 0.0));
        for (std::size_t u = 0; u < K; ++u)
          for (std::size_t v = 0; v < K; ++v) {
            const std::size_t t = u * K + v;
            const std::ptrdiff_t pi = tap_row(i, u, w), pj = tap_row(j, v, w);
            const bool inside = pi >= 0 && pj >= 0 && pi < static_cast<std::ptrdiff_t>(H) &&
                                pj < static_cast<std::ptrdiff_t>(W);
            std::vector<double> key(C, 0.0);
            if (inside) {
              const auto si = static_cast<std::size_t>(pi), sj = static_cast<std::size_t>(pj);
              for (std::size_t c = 0; c < C; ++c) {
                vals[t][c] = values.at({b, c, si, sj});
                key[c] = keys.at({b, c, si, sj});
              }
            }
            for (std::size_t h = 0; h < Hn; ++h)
              for (std::size_t cc = 0; cc < Ch; ++cc) {
                const double other = cfg.mode == AttentionMode::kContent ? key[h * Ch + cc] : spec.rel_pos->value.at({t, cc});
                aff[h][t] += q[h * Ch + cc] * other;
              }
          }
        if (cfg.softmax) {
          for (auto& row : aff) {
            double mx = row[0];
            for (double a : row) mx = std::max(mx, a);
            double z = 0.0;
            for (double a : row) z += std::exp(a - mx);
            for (double& a : row) a = std::exp(a - mx) / z;
          }
        }
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t t = 0; t < K * K; ++t) acc += aff[c / Ch][t] * vals[t][c];
          out.at({b, c, i, j}) = acc;
        }
      }
  return out;
}

}  // namespace involution::reference
