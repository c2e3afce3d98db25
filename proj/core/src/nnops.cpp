#include "involution/nnops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"
#include "ops_detail.hpp"

namespace involution {

namespace {

void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(op) + " expects a (B, C, H, W) tensor, got " + shape_to_string(x.shape()));
  }
}

std::string dims(std::size_t a, std::size_t b) { return std::to_string(a) + " and " + std::to_string(b); }

}  // namespace

Window same_window(std::size_t kernel, std::size_t stride, std::size_t dilation) {
  if (kernel % 2 == 0) throw ShapeError("kernel size must be odd, got " + std::to_string(kernel));
  return Window{kernel, stride, dilation, (kernel / 2) * dilation};
}

std::size_t window_out(std::size_t in, const Window& w) {
  if (w.kernel == 0 || w.stride == 0 || w.dilation == 0) throw ShapeError("window parameters must be positive");
  const std::size_t span = w.dilation * (w.kernel - 1) + 1;
  if (in + 2 * w.padding < span) {
    throw ShapeError("window of span " + std::to_string(span) + " does not fit input extent " + std::to_string(in));
  }
  return (in + 2 * w.padding - span) / w.stride + 1;
}

BatchNormState::BatchNormState(const std::string& name, std::size_t channels)
    : gamma(name + ".weight", Tensor::ones({channels})),
      beta(name + ".bias", Tensor::zeros({channels})),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::ones({channels})) {}

void ConvConfig::validate() const {
  if (in_channels == 0 || out_channels == 0 || groups == 0) throw ShapeError("conv: channels and groups must be positive");
  if (in_channels % groups || out_channels % groups) {
    throw ShapeError("conv: channels " + dims(in_channels, out_channels) + " not divisible by groups " +
                     std::to_string(groups));
  }
  if (kernel % 2 == 0) throw ShapeError("conv: kernel size must be odd");
  if (stride == 0 || dilation == 0) throw ShapeError("conv: stride and dilation must be positive");
}

ConvSpec make_conv(const std::string& name, const ConvConfig& config, Prng& rng) {
  config.validate();
  const std::size_t cin_g = config.in_channels / config.groups;
  const double fan_in = static_cast<double>(cin_g * config.kernel * config.kernel);
  ConvSpec spec;
  spec.config = config;
  spec.filters = Parameter(name + ".weight",
                           random_normal({config.out_channels, cin_g, config.kernel, config.kernel}, rng,
                                         std::sqrt(2.0 / fan_in)));
  if (config.bias) spec.bias = Parameter(name + ".bias", Tensor::zeros({config.out_channels}));
  return spec;
}

void InvolutionConfig::validate() const {
  if (channels == 0 || groups == 0 || reduction == 0) throw ShapeError("involution: C, G and r must be positive");
  if (channels % groups) throw ShapeError("involution: C=" + std::to_string(channels) + " not divisible by G=" + std::to_string(groups));
  if (form == KernelForm::kBottleneck && channels % reduction) {
    throw ShapeError("involution: C=" + std::to_string(channels) + " not divisible by r=" + std::to_string(reduction));
  }
  if (kernel % 2 == 0) throw ShapeError("involution: kernel size must be odd");
  if (stride == 0 || dilation == 0) throw ShapeError("involution: stride and dilation must be positive");
}

InvolutionSpec make_involution(const std::string& name, const InvolutionConfig& config, Prng& rng) {
  config.validate();
  InvolutionSpec spec;
  spec.config = config;
  const std::size_t c = config.channels;
  const std::size_t out = config.taps() * config.groups;
  std::size_t span_in = c;
  if (config.form == KernelForm::kBottleneck) {
    const std::size_t cr = config.reduced_channels();
    spec.reduce = Parameter(name + ".reduce.weight", random_normal({cr, c}, rng, std::sqrt(2.0 / static_cast<double>(c))));
    spec.bn.emplace(name + ".reduce.bn", cr);
    span_in = cr;
  }
  // Keeps the summed response of K*K taps near unit scale at init.
  const double span_std = 1.0 / (static_cast<double>(config.kernel) * std::sqrt(static_cast<double>(span_in)));
  spec.span = Parameter(name + ".span.weight", random_normal({out, span_in}, rng, span_std));
  spec.span_bias = Parameter(name + ".span.bias", Tensor::zeros({out}));
  return spec;
}

void AttentionConfig::validate() const {
  if (channels == 0 || heads == 0) throw ShapeError("attention: channels and heads must be positive");
  if (channels % heads) throw ShapeError("attention: C=" + std::to_string(channels) + " not divisible by heads=" + std::to_string(heads));
  if (window % 2 == 0) throw ShapeError("attention: window must be odd");
  if (stride == 0 || dilation == 0) throw ShapeError("attention: stride and dilation must be positive");
}

AttentionSpec make_attention(const std::string& name, const AttentionConfig& config, Prng& rng) {
  config.validate();
  const std::size_t c = config.channels;
  const double std_proj = 1.0 / std::sqrt(static_cast<double>(c));
  AttentionSpec spec;
  spec.config = config;
  spec.query = Parameter(name + ".query", random_normal({c, c}, rng, std_proj));
  if (config.mode == AttentionMode::kContent) {
    spec.key = Parameter(name + ".key", random_normal({c, c}, rng, std_proj));
  }
  spec.value = Parameter(name + ".value", random_normal({c, c}, rng, std_proj));
  if (config.mode == AttentionMode::kPosition) {
    const std::size_t ch = c / config.heads;
    spec.rel_pos = Parameter(name + ".rel_pos", random_normal({config.window * config.window, ch}, rng,
                                                              1.0 / std::sqrt(static_cast<double>(ch))));
  }
  return spec;
}

std::vector<Parameter*> parameters_of(ConvSpec& spec) {
  std::vector<Parameter*> out{&spec.filters};
  if (spec.bias) out.push_back(&*spec.bias);
  return out;
}

std::vector<Parameter*> parameters_of(BatchNormState& state) { return {&state.gamma, &state.beta}; }

std::vector<Parameter*> parameters_of(InvolutionSpec& spec) {
  std::vector<Parameter*> out;
  if (spec.reduce) out.push_back(&*spec.reduce);
  if (spec.bn) {
    out.push_back(&spec.bn->gamma);
    out.push_back(&spec.bn->beta);
  }
  out.push_back(&spec.span);
  out.push_back(&spec.span_bias);
  return out;
}

std::vector<Parameter*> parameters_of(AttentionSpec& spec) {
  std::vector<Parameter*> out{&spec.query};
  if (spec.config.mode == AttentionMode::kContent) out.push_back(&spec.key);
  out.push_back(&spec.value);
  if (spec.rel_pos) out.push_back(&*spec.rel_pos);
  return out;
}

namespace detail {

Tensor content_affinity(const Tensor& q, const Tensor& kcols, std::size_t heads, std::size_t taps) {
  const std::size_t B = q.dim(0), C = q.dim(1), Ho = q.dim(2), Wo = q.dim(3), L = Ho * Wo, Ch = C / heads;
  if (kcols.shape() != Shape{B, C * taps, L}) throw ShapeError("attention: key columns do not match queries");
  Tensor affinity = Tensor::zeros({B, heads, taps, Ho, Wo});
  auto a = affinity.data();
  auto qv = q.data();
  auto kc = kcols.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < taps; ++t) {
        double* ar = a.data() + ((b * heads + h) * taps + t) * L;
        for (std::size_t cc = 0; cc < Ch; ++cc) {
          const std::size_t c = h * Ch + cc;
          const double* qr = qv.data() + (b * C + c) * L;
          const double* kr = kc.data() + ((b * C + c) * taps + t) * L;
          for (std::size_t l = 0; l < L; ++l) ar[l] += qr[l] * kr[l];
        }
      }
  return affinity;
}

Tensor position_affinity(const Tensor& q, const Tensor& rel, std::size_t heads) {
  const std::size_t B = q.dim(0), C = q.dim(1), Ho = q.dim(2), Wo = q.dim(3), L = Ho * Wo, Ch = C / heads;
  if (rel.rank() != 2 || rel.dim(1) != Ch) throw ShapeError("attention: position table must be (K*K, C/heads)");
  const std::size_t taps = rel.dim(0);
  Tensor affinity = Tensor::zeros({B, heads, taps, Ho, Wo});
  auto a = affinity.data();
  auto qv = q.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < taps; ++t) {
        double* ar = a.data() + ((b * heads + h) * taps + t) * L;
        for (std::size_t cc = 0; cc < Ch; ++cc) {
          const double r = rel[t * Ch + cc];
          const double* qr = qv.data() + (b * C + h * Ch + cc) * L;
          for (std::size_t l = 0; l < L; ++l) ar[l] += qr[l] * r;
        }
      }
  return affinity;
}

}  // namespace detail

namespace ops {

Tensor unfold(const Tensor& x, const Window& w) {
  require_rank4(x, "unfold");
  if (w.kernel % 2 == 0) throw ShapeError("unfold: even kernel sizes have no center tap");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = window_out(H, w), Wo = window_out(W, w);
  const std::size_t K = w.kernel, L = Ho * Wo;
  Tensor out = Tensor::zeros({B, C * K * K, L});
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = src.data() + (b * C + c) * H * W;
      for (std::size_t ki = 0; ki < K; ++ki) {
        for (std::size_t kj = 0; kj < K; ++kj) {
          double* row = dst.data() + ((b * C + c) * K * K + ki * K + kj) * L;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const long ih = static_cast<long>(oh * w.stride + ki * w.dilation) - static_cast<long>(w.padding);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const long iw = static_cast<long>(ow * w.stride + kj * w.dilation) - static_cast<long>(w.padding);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              row[oh * Wo + ow] = plane[ih * W + iw];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor fold(const Tensor& cols, const Shape& x_shape, const Window& w) {
  if (x_shape.size() != 4) throw ShapeError("fold: target shape must be (B, C, H, W)");
  const std::size_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t Ho = window_out(H, w), Wo = window_out(W, w);
  const std::size_t K = w.kernel, L = Ho * Wo;
  if (cols.shape() != Shape{B, C * K * K, L}) {
    throw ShapeError("fold: columns " + shape_to_string(cols.shape()) + " do not match target " + shape_to_string(x_shape));
  }
  Tensor out = Tensor::zeros(x_shape);
  auto src = cols.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double* plane = dst.data() + (b * C + c) * H * W;
      for (std::size_t ki = 0; ki < K; ++ki) {
        for (std::size_t kj = 0; kj < K; ++kj) {
          const double* row = src.data() + ((b * C + c) * K * K + ki * K + kj) * L;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const long ih = static_cast<long>(oh * w.stride + ki * w.dilation) - static_cast<long>(w.padding);
            if (ih < 0 || ih >= static_cast<long>(H)) continue;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const long iw = static_cast<long>(ow * w.stride + kj * w.dilation) - static_cast<long>(w.padding);
              if (iw < 0 || iw >= static_cast<long>(W)) continue;
              plane[ih * W + iw] += row[oh * Wo + ow];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor avg_pool2d(const Tensor& x, std::size_t s) {
  require_rank4(x, "avg_pool2d");
  if (s == 0) throw ShapeError("avg_pool2d: stride must be positive");
  if (s == 1) return x;
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % s || W % s) {
    throw ShapeError("avg_pool2d: spatial size " + dims(H, W) + " not divisible by " + std::to_string(s));
  }
  const std::size_t Ho = H / s, Wo = W / s;
  Tensor out = Tensor::zeros({B, C, Ho, Wo});
  const double inv = 1.0 / static_cast<double>(s * s);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t p = 0; p < B * C; ++p) {
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        double acc = 0.0;
        for (std::size_t i = 0; i < s; ++i)
          for (std::size_t j = 0; j < s; ++j) acc += src[(p * H + oh * s + i) * W + ow * s + j];
        dst[(p * Ho + oh) * Wo + ow] = acc * inv;
      }
    }
  }
  return out;
}

Tensor avg_pool2d_backward(const Tensor& grad_out, const Shape& x_shape, std::size_t s) {
  if (s == 1) return grad_out;
  const std::size_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t Ho = H / s, Wo = W / s;
  Tensor out = Tensor::zeros(x_shape);
  const double inv = 1.0 / static_cast<double>(s * s);
  auto g = grad_out.data();
  auto dst = out.data();
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) dst[(p * H + h) * W + w] = g[(p * Ho + h / s) * Wo + w / s] * inv;
  return out;
}

MaxPoolResult max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  require_rank4(x, "max_pool2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Window w{kernel, stride, 1, padding};
  const std::size_t Ho = window_out(H, w), Wo = window_out(W, w);
  MaxPoolResult r{Tensor::zeros({B, C, Ho, Wo}), std::vector<std::size_t>(B * C * Ho * Wo)};
  auto src = x.data();
  auto dst = r.out.data();
  for (std::size_t p = 0; p < B * C; ++p) {
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t i = 0; i < kernel; ++i) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(padding);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t j = 0; j < kernel; ++j) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(padding);
            if (iw < 0 || iw >= static_cast<long>(W)) continue;
            const std::size_t idx = (p * H + ih) * W + iw;
            if (src[idx] > best) {
              best = src[idx];
              arg = idx;
            }
          }
        }
        const std::size_t o = (p * Ho + oh) * Wo + ow;
        dst[o] = best;
        r.argmax[o] = arg;
      }
    }
  }
  return r;
}

Tensor max_pool2d_backward(const Tensor& grad_out, const std::vector<std::size_t>& argmax, const Shape& x_shape) {
  Tensor out = Tensor::zeros(x_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) out[argmax[o]] += grad_out[o];
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor* bias, const Window& w, std::size_t groups) {
  require_rank4(x, "conv2d");
  if (filters.rank() != 4) throw ShapeError("conv2d: filters must be (C_o, C_i/groups, K, K)");
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t Co = filters.dim(0), Cg = filters.dim(1), K = filters.dim(2);
  if (groups == 0 || C % groups || Co % groups || C / groups != Cg || filters.dim(3) != K || K != w.kernel) {
    throw ShapeError("conv2d: input " + shape_to_string(x.shape()) + " incompatible with filters " +
                     shape_to_string(filters.shape()) + " at groups=" + std::to_string(groups));
  }
  if (bias && bias->shape() != Shape{Co}) throw ShapeError("conv2d: bias must have C_o elements");
  const Tensor cols = unfold(x, w);
  const std::size_t Ho = window_out(x.dim(2), w), Wo = window_out(x.dim(3), w), L = Ho * Wo;
  const std::size_t Cog = Co / groups, rows = Cg * K * K;
  Tensor out = Tensor::zeros({B, Co, Ho, Wo});
  auto col = cols.data();
  auto f = filters.data();
  auto o = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < groups; ++g) {
      detail::gemm_nn(Cog, L, rows, f.data() + g * Cog * rows, col.data() + (b * C * K * K + g * rows) * L,
                      o.data() + (b * Co + g * Cog) * L);
    }
    if (bias) {
      for (std::size_t c = 0; c < Co; ++c)
        for (std::size_t l = 0; l < L; ++l) o[(b * Co + c) * L + l] += (*bias)[c];
    }
  }
  return out;
}

Tensor conv2d(const Tensor& x, const ConvSpec& spec) {
  const Tensor* bias = spec.bias ? &spec.bias->value : nullptr;
  return conv2d(x, spec.filters.value, bias, spec.config.window(), spec.config.groups);
}

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& filters, bool has_bias, const Window& w,
                            std::size_t groups, const Tensor& grad_out, bool need_x) {
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t Co = filters.dim(0), Cg = filters.dim(1), K = filters.dim(2);
  const std::size_t L = grad_out.dim(2) * grad_out.dim(3);
  const std::size_t Cog = Co / groups, rows = Cg * K * K;
  const Tensor cols = unfold(x, w);
  Conv2dGrads g{Tensor(), Tensor::zeros(filters.shape()), Tensor::zeros({Co})};
  Tensor gcols = need_x ? Tensor::zeros(cols.shape()) : Tensor();
  auto col = cols.data();
  auto f = filters.data();
  auto gy = grad_out.data();
  auto gf = g.filters.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t grp = 0; grp < groups; ++grp) {
      const double* gyb = gy.data() + (b * Co + grp * Cog) * L;
      const double* colb = col.data() + (b * C * K * K + grp * rows) * L;
      detail::gemm_nt(Cog, rows, L, gyb, colb, gf.data() + grp * Cog * rows);
      if (need_x) {
        detail::gemm_tn(rows, L, Cog, f.data() + grp * Cog * rows, gyb,
                        gcols.data().data() + (b * C * K * K + grp * rows) * L);
      }
    }
    if (has_bias) {
      for (std::size_t c = 0; c < Co; ++c)
        for (std::size_t l = 0; l < L; ++l) g.bias[c] += gy[(b * Co + c) * L + l];
    }
  }
  if (need_x) g.x = fold(gcols, x.shape(), w);
  return g;
}

Tensor depthwise_conv2d(const Tensor& x, const ConvSpec& spec) {
  const ConvConfig& cfg = spec.config;
  if (cfg.in_channels != cfg.out_channels || cfg.groups != cfg.in_channels) {
    throw ShapeError("depthwise_conv2d requires C_o == C_i == groups, got C_i=" + std::to_string(cfg.in_channels) +
                     " C_o=" + std::to_string(cfg.out_channels) + " groups=" + std::to_string(cfg.groups));
  }
  return conv2d(x, spec);
}

Tensor linear_1x1(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  require_rank4(x, "linear_1x1");
  if (weight.rank() != 2 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("linear_1x1: weight " + shape_to_string(weight.shape()) + " incompatible with input " +
                     shape_to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = weight.dim(0), L = x.dim(2) * x.dim(3);
  if (bias && bias->shape() != Shape{Co}) throw ShapeError("linear_1x1: bias must have C_o elements");
  Tensor out = Tensor::zeros({B, Co, x.dim(2), x.dim(3)});
  auto o = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    double* ob = o.data() + b * Co * L;
    if (bias) {
      for (std::size_t c = 0; c < Co; ++c) std::fill_n(ob + c * L, L, (*bias)[c]);
    }
    detail::gemm_nn(Co, L, Ci, weight.data().data(), x.data().data() + b * Ci * L, ob);
  }
  return out;
}

Linear1x1Grads linear_1x1_backward(const Tensor& x, const Tensor& weight, bool has_bias, const Tensor& grad_out,
                                   bool need_x) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = weight.dim(0), L = x.dim(2) * x.dim(3);
  Linear1x1Grads g{need_x ? Tensor::zeros(x.shape()) : Tensor(), Tensor::zeros(weight.shape()), Tensor::zeros({Co})};
  auto gy = grad_out.data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* gyb = gy.data() + b * Co * L;
    detail::gemm_nt(Co, Ci, L, gyb, x.data().data() + b * Ci * L, g.weight.data().data());
    if (need_x) detail::gemm_tn(Ci, L, Co, weight.data().data(), gyb, g.x.data().data() + b * Ci * L);
    if (has_bias) {
      for (std::size_t c = 0; c < Co; ++c)
        for (std::size_t l = 0; l < L; ++l) g.bias[c] += gyb[c * L + l];
    }
  }
  return g;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("linear: weight " + shape_to_string(weight.shape()) + " incompatible with input " +
                     shape_to_string(x.shape()));
  }
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = weight.dim(0);
  if (bias && bias->shape() != Shape{Co}) throw ShapeError("linear: bias must have C_o elements");
  Tensor out = Tensor::zeros({B, Co});
  auto o = out.data();
  if (bias) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < Co; ++c) o[b * Co + c] = (*bias)[c];
  }
  detail::gemm_nt(B, Co, Ci, x.data().data(), weight.data().data(), o.data());
  return out;
}

void batch_moments(const Tensor& x, Tensor& mean, Tensor& var) {
  require_rank4(x, "batch_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
  const double n = static_cast<double>(B * L);
  mean = Tensor::zeros({C});
  var = Tensor::zeros({C});
  auto src = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l) acc += src[(b * C + c) * L + l];
    const double m = acc / n;
    double sq = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < L; ++l) {
        const double d = src[(b * C + c) * L + l] - m;
        sq += d * d;
      }
    mean[c] = m;
    var[c] = sq / n;
  }
}

Tensor batch_norm_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormState& state) {
  require_rank4(x, "batch_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("batch_norm: affine parameters must have " + std::to_string(C) + " elements");
  }
  Tensor mean, var;
  if (state.mode == BnMode::kTrain) {
    batch_moments(x, mean, var);
  } else {
    if (state.running_mean.shape() != Shape{C}) throw ShapeError("batch_norm: running statistics have the wrong size");
    mean = state.running_mean;
    var = state.running_var;
  }
  Tensor out = x;
  auto o = out.data();
  for (std::size_t c = 0; c < C; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + state.eps);
    const double a = gamma[c] * inv;
    const double shift = beta[c] - mean[c] * a;
    for (std::size_t b = 0; b < B; ++b) {
      double* p = o.data() + (b * C + c) * L;
      for (std::size_t l = 0; l < L; ++l) p[l] = p[l] * a + shift;
    }
  }
  return out;
}

Tensor batch_norm_apply(const Tensor& x, const BatchNormState& state) {
  return batch_norm_apply(x, state.gamma.value, state.beta.value, state);
}

void batch_norm_update_running(const Tensor& x, BatchNormState& state) {
  Tensor mean, var;
  batch_moments(x, mean, var);
  const double n = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
  const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
  const double m = state.momentum;
  for (std::size_t c = 0; c < mean.numel(); ++c) {
    state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean[c];
    state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var[c] * unbias;
  }
}

Tensor batch_norm(const Tensor& x, BatchNormState& state) {
  Tensor out = batch_norm_apply(x, state);
  if (state.mode == BnMode::kTrain) batch_norm_update_running(x, state);
  return out;
}

Tensor relu(const Tensor& x) {
  return ew_map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

namespace {

// Splits a shape around `axis` into (outer, n, inner).
void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  if (axis >= shape.size()) throw ShapeError("axis out of range for shape " + shape_to_string(shape));
  outer = inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  n = shape[axis];
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  std::size_t outer, n, inner;
  split_axis(x.shape(), axis, outer, n, inner);
  Tensor out = x;
  auto o = out.data();
  for (std::size_t i = 0; i < outer; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, o[(i * n + j) * inner + k]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double& v = o[(i * n + j) * inner + k];
        v = std::exp(v - mx);
        z += v;
      }
      for (std::size_t j = 0; j < n; ++j) o[(i * n + j) * inner + k] /= z;
    }
  }
  return out;
}

Tensor softmax_backward(const Tensor& y, const Tensor& grad_out, std::size_t axis) {
  std::size_t outer, n, inner;
  split_axis(y.shape(), axis, outer, n, inner);
  Tensor gx = Tensor::zeros(y.shape());
  for (std::size_t i = 0; i < outer; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = (i * n + j) * inner + k;
        dot += y[idx] * grad_out[idx];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = (i * n + j) * inner + k;
        gx[idx] = y[idx] * (grad_out[idx] - dot);
      }
    }
  }
  return gx;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank4(x, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({B, C});
  for (std::size_t p = 0; p < B * C; ++p) {
    double acc = 0.0;
    for (std::size_t l = 0; l < L; ++l) acc += x[p * L + l];
    out[p] = acc / static_cast<double>(L);
  }
  return out;
}

Tensor kernel_generate(const Tensor& x, const InvolutionSpec& spec) {
  require_rank4(x, "kernel_generate");
  const InvolutionConfig& cfg = spec.config;
  cfg.validate();
  if (x.dim(1) != cfg.channels) {
    throw ShapeError("kernel_generate: input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(cfg.channels));
  }
  const Tensor pooled = avg_pool2d(x, cfg.stride);
  Tensor hidden = pooled;
  if (cfg.form == KernelForm::kBottleneck) {
    hidden = relu(batch_norm_apply(linear_1x1(pooled, spec.reduce->value, nullptr), *spec.bn));
  }
  Tensor k = linear_1x1(hidden, spec.span.value, &spec.span_bias.value);
  Tensor kernel = reshape(k, {x.dim(0), cfg.groups, cfg.taps(), pooled.dim(2), pooled.dim(3)});
  if (cfg.softmax_kernel) kernel = softmax(kernel, 2);
  return kernel;
}

namespace {

void check_mac_shapes(const Tensor& x, const Tensor& kernel, const Window& w, std::size_t& G, std::size_t& L) {
  require_rank4(x, "involution_mac");
  if (kernel.rank() != 5) throw ShapeError("involution_mac: kernel must be (B, G, K*K, H_out, W_out)");
  const std::size_t Ho = window_out(x.dim(2), w), Wo = window_out(x.dim(3), w);
  G = kernel.dim(1);
  L = Ho * Wo;
  if (kernel.dim(0) != x.dim(0) || kernel.dim(2) != w.kernel * w.kernel || kernel.dim(3) != Ho || kernel.dim(4) != Wo ||
      G == 0 || x.dim(1) % G) {
    throw ShapeError("involution_mac: kernel " + shape_to_string(kernel.shape()) + " inconsistent with input " +
                     shape_to_string(x.shape()) + " at K=" + std::to_string(w.kernel) + ", stride=" + std::to_string(w.stride));
  }
}

}  // namespace

Tensor involution_mac(const Tensor& x, const Tensor& kernel, const Window& w) {
  std::size_t G, L;
  check_mac_shapes(x, kernel, w, G, L);
  const std::size_t B = x.dim(0), C = x.dim(1), KK = w.kernel * w.kernel, Cg = C / G;
  // Unfold, multiply with the kernel broadcast over the channels of each
  // group, then sum over the taps.
  const Tensor cols = unfold(x, w);
  Tensor out = Tensor::zeros({B, C, kernel.dim(3), kernel.dim(4)});
  auto col = cols.data();
  auto ker = kernel.data();
  auto o = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t g = c / Cg;
      double* oc = o.data() + (b * C + c) * L;
      for (std::size_t t = 0; t < KK; ++t) {
        const double* kr = ker.data() + ((b * G + g) * KK + t) * L;
        const double* xr = col.data() + ((b * C + c) * KK + t) * L;
        for (std::size_t l = 0; l < L; ++l) oc[l] += kr[l] * xr[l];
      }
    }
  }
  return out;
}

InvolutionMacGrads involution_mac_backward(const Tensor& x, const Tensor& kernel, const Window& w,
                                           const Tensor& grad_out, bool need_x) {
  std::size_t G, L;
  check_mac_shapes(x, kernel, w, G, L);
  const std::size_t B = x.dim(0), C = x.dim(1), KK = w.kernel * w.kernel, Cg = C / G;
  const Tensor cols = unfold(x, w);
  Tensor gcols = need_x ? Tensor::zeros(cols.shape()) : Tensor();
  InvolutionMacGrads g{Tensor(), Tensor::zeros(kernel.shape())};
  auto col = cols.data();
  auto ker = kernel.data();
  auto gy = grad_out.data();
  auto gk = g.kernel.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t grp = c / Cg;
      const double* gyc = gy.data() + (b * C + c) * L;
      for (std::size_t t = 0; t < KK; ++t) {
        const std::size_t krow = ((b * G + grp) * KK + t) * L;
        const std::size_t xrow = ((b * C + c) * KK + t) * L;
        for (std::size_t l = 0; l < L; ++l) gk[krow + l] += gyc[l] * col[xrow + l];
        if (need_x) {
          double* gc = gcols.data().data() + xrow;
          for (std::size_t l = 0; l < L; ++l) gc[l] = ker[krow + l] * gyc[l];
        }
      }
    }
  }
  if (need_x) g.x = fold(gcols, x.shape(), w);
  return g;
}

Tensor involution(const Tensor& x, const InvolutionSpec& spec) {
  return involution_mac(x, kernel_generate(x, spec), spec.config.window());
}

Tensor attention_affinity(const Tensor& x, const AttentionSpec& spec) {
  require_rank4(x, "local_self_attention");
  const AttentionConfig& cfg = spec.config;
  cfg.validate();
  const std::size_t C = x.dim(1);
  if (C != cfg.channels) throw ShapeError("local_self_attention: channel count does not match spec");
  const Window w = cfg.unfold_window();
  const std::size_t KK = cfg.window * cfg.window, Hn = cfg.heads;
  const Tensor q = linear_1x1(avg_pool2d(x, cfg.stride), spec.query.value, nullptr);
  const std::size_t Ho = q.dim(2), Wo = q.dim(3);
  if (window_out(x.dim(2), w) != Ho || window_out(x.dim(3), w) != Wo) {
    throw ShapeError("local_self_attention: pooled query grid does not match the strided window grid");
  }
  Tensor affinity = cfg.mode == AttentionMode::kContent
                        ? detail::content_affinity(q, unfold(linear_1x1(x, spec.key.value, nullptr), w), Hn, KK)
                        : detail::position_affinity(q, spec.rel_pos->value, Hn);
  if (cfg.softmax) affinity = softmax(affinity, 2);
  return affinity;
}

Tensor attention_values(const Tensor& x, const AttentionSpec& spec) {
  return linear_1x1(x, spec.value.value, nullptr);
}

Tensor local_self_attention(const Tensor& x, const AttentionSpec& spec) {
  return involution_mac(attention_values(x, spec), attention_affinity(x, spec), spec.config.unfold_window());
}

}  // namespace ops

}  // namespace involution
