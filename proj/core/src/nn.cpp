#include <cmath>

#include "involution/nnops.hpp"
#include "ops_detail.hpp"

namespace involution::nn {

namespace {

using Grads = std::vector<Tensor>;
using Needed = std::span<const bool>;

}  // namespace

Var unfold(Var x, const Window& w) {
  Shape xs = x.shape();
  return x.tape().record("unfold", {x}, ops::unfold(x.value(), w),
                         [xs, w](const Tensor& g, Needed) { return Grads{ops::fold(g, xs, w)}; });
}

Var avg_pool2d(Var x, std::size_t s) {
  if (s == 1) return x;
  Shape xs = x.shape();
  return x.tape().record("avg_pool2d", {x}, ops::avg_pool2d(x.value(), s),
                         [xs, s](const Tensor& g, Needed) { return Grads{ops::avg_pool2d_backward(g, xs, s)}; });
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  Shape xs = x.shape();
  ops::MaxPoolResult r = ops::max_pool2d(x.value(), kernel, stride, padding);
  auto argmax = std::move(r.argmax);
  return x.tape().record("max_pool2d", {x}, std::move(r.out), [xs, argmax](const Tensor& g, Needed) {
    return Grads{ops::max_pool2d_backward(g, argmax, xs)};
  });
}

Var conv2d(Var x, Var filters, Var bias, const Window& w, std::size_t groups) {
  const bool has_bias = bias.valid();
  Tensor xv = x.value(), fv = filters.value();
  Tensor out = ops::conv2d(xv, fv, has_bias ? &bias.value() : nullptr, w, groups);
  std::vector<Var> inputs{x, filters};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record("conv2d", std::move(inputs), std::move(out),
                         [xv, fv, has_bias, w, groups](const Tensor& g, Needed needed) {
                           ops::Conv2dGrads cg = ops::conv2d_backward(xv, fv, has_bias, w, groups, g, needed[0]);
                           Grads grads{std::move(cg.x), std::move(cg.filters)};
                           if (has_bias) grads.push_back(std::move(cg.bias));
                           return grads;
                         });
}

Var conv2d(Var x, ConvSpec& spec) {
  Tape& tape = x.tape();
  Var bias = spec.bias ? tape.param(*spec.bias) : Var();
  return conv2d(x, tape.param(spec.filters), bias, spec.config.window(), spec.config.groups);
}

Var depthwise_conv2d(Var x, ConvSpec& spec) {
  const ConvConfig& cfg = spec.config;
  if (cfg.in_channels != cfg.out_channels || cfg.groups != cfg.in_channels) {
    throw ShapeError("depthwise_conv2d requires C_o == C_i == groups");
  }
  return conv2d(x, spec);
}

Var linear_1x1(Var x, Var weight, Var bias) {
  const bool has_bias = bias.valid();
  Tensor xv = x.value(), wv = weight.value();
  Tensor out = ops::linear_1x1(xv, wv, has_bias ? &bias.value() : nullptr);
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record("linear_1x1", std::move(inputs), std::move(out),
                         [xv, wv, has_bias](const Tensor& g, Needed needed) {
                           ops::Linear1x1Grads lg = ops::linear_1x1_backward(xv, wv, has_bias, g, needed[0]);
                           Grads grads{std::move(lg.x), std::move(lg.weight)};
                           if (has_bias) grads.push_back(std::move(lg.bias));
                           return grads;
                         });
}

Var linear(Var x, Var weight, Var bias) {
  const bool has_bias = bias.valid();
  Tensor xv = x.value(), wv = weight.value();
  Tensor out = ops::linear(xv, wv, has_bias ? &bias.value() : nullptr);
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record("linear", std::move(inputs), std::move(out), [xv, wv, has_bias](const Tensor& g, Needed) {
    Grads grads{matmul(g, wv), matmul(transpose(g), xv)};
    if (has_bias) grads.push_back(reduce_sum(g, {0}));
    return grads;
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state) {
  Tensor xv = x.value(), gv = gamma.value();
  Tensor out = ops::batch_norm_apply(xv, gv, beta.value(), state);
  const BnMode mode = state.mode;
  const double eps = state.eps;
  Tensor mean, var;
  if (mode == BnMode::kTrain) {
    ops::batch_moments(xv, mean, var);
    // Running estimates move once per recorded forward.
    ops::batch_norm_update_running(xv, state);
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  return x.tape().record(
      "batch_norm", {x, gamma, beta}, std::move(out), [xv, gv, mean, var, mode, eps](const Tensor& g, Needed) {
        const std::size_t B = xv.dim(0), C = xv.dim(1), L = xv.dim(2) * xv.dim(3);
        const double n = static_cast<double>(B * L);
        Tensor gx = Tensor::zeros(xv.shape()), ggamma = Tensor::zeros({C}), gbeta = Tensor::zeros({C});
        for (std::size_t c = 0; c < C; ++c) {
          const double inv = 1.0 / std::sqrt(var[c] + eps);
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t i = (b * C + c) * L + l;
              const double xhat = (xv[i] - mean[c]) * inv;
              sum_g += g[i];
              sum_gx += g[i] * xhat;
            }
          gbeta[c] = sum_g;
          ggamma[c] = sum_gx;
          const double a = gv[c] * inv;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t i = (b * C + c) * L + l;
              if (mode == BnMode::kTrain) {
                const double xhat = (xv[i] - mean[c]) * inv;
                gx[i] = a * (g[i] - sum_g / n - xhat * sum_gx / n);
              } else {
                gx[i] = a * g[i];
              }
            }
        }
        return Grads{std::move(gx), std::move(ggamma), std::move(gbeta)};
      });
}

Var batch_norm(Var x, BatchNormState& state) {
  Tape& tape = x.tape();
  return batch_norm(x, tape.param(state.gamma), tape.param(state.beta), state);
}

Var relu(Var x) { return ad::relu(x); }

Var softmax(Var x, std::size_t axis) {
  Tensor y = ops::softmax(x.value(), axis);
  Tensor yc = y;
  return x.tape().record("softmax", {x}, std::move(y), [yc, axis](const Tensor& g, Needed) {
    return Grads{ops::softmax_backward(yc, g, axis)};
  });
}

Var global_avg_pool(Var x) {
  Shape xs = x.shape();
  return x.tape().record("global_avg_pool", {x}, ops::global_avg_pool(x.value()), [xs](const Tensor& g, Needed) {
    const std::size_t L = xs[2] * xs[3];
    Tensor gx = Tensor::zeros(xs);
    for (std::size_t p = 0; p < xs[0] * xs[1]; ++p)
      for (std::size_t l = 0; l < L; ++l) gx[p * L + l] = g[p] / static_cast<double>(L);
    return Grads{std::move(gx)};
  });
}

InvolutionVars bind(Tape& tape, InvolutionSpec& spec) {
  InvolutionVars w;
  if (spec.reduce) w.reduce = tape.param(*spec.reduce);
  if (spec.bn) {
    w.bn_gamma = tape.param(spec.bn->gamma);
    w.bn_beta = tape.param(spec.bn->beta);
  }
  w.span = tape.param(spec.span);
  w.span_bias = tape.param(spec.span_bias);
  return w;
}

Var kernel_generate(Var x, const InvolutionConfig& config, const InvolutionVars& w, BatchNormState* bn) {
  config.validate();
  const Shape xs = x.shape();
  if (xs.size() != 4 || xs[1] != config.channels) {
    throw ShapeError("kernel_generate: input " + shape_to_string(xs) + " does not match C=" +
                     std::to_string(config.channels));
  }
  Var h = avg_pool2d(x, config.stride);
  const std::size_t ho = h.shape()[2], wo = h.shape()[3];
  if (config.form == KernelForm::kBottleneck) {
    if (!w.reduce.valid() || bn == nullptr) throw std::invalid_argument("kernel_generate: bottleneck form needs W0 and BN");
    h = relu(batch_norm(linear_1x1(h, w.reduce, Var()), w.bn_gamma, w.bn_beta, *bn));
  }
  Var k = linear_1x1(h, w.span, w.span_bias);
  k = ad::reshape(k, {xs[0], config.groups, config.taps(), ho, wo});
  if (config.softmax_kernel) k = softmax(k, 2);
  return k;
}

Var kernel_generate(Var x, InvolutionSpec& spec) {
  InvolutionVars w = bind(x.tape(), spec);
  return kernel_generate(x, spec.config, w, spec.bn ? &*spec.bn : nullptr);
}

Var involution_mac(Var x, Var kernel, const Window& w) {
  Tensor xv = x.value(), kv = kernel.value();
  Tensor out = ops::involution_mac(xv, kv, w);
  return x.tape().record("involution_mac", {x, kernel}, std::move(out), [xv, kv, w](const Tensor& g, Needed needed) {
    ops::InvolutionMacGrads mg = ops::involution_mac_backward(xv, kv, w, g, needed[0]);
    return Grads{std::move(mg.x), std::move(mg.kernel)};
  });
}

Var involution(Var x, InvolutionSpec& spec) {
  return involution_mac(x, kernel_generate(x, spec), spec.config.window());
}

AttentionVars bind(Tape& tape, AttentionSpec& spec) {
  AttentionVars w;
  w.query = tape.param(spec.query);
  if (spec.config.mode == AttentionMode::kContent) w.key = tape.param(spec.key);
  w.value = tape.param(spec.value);
  if (spec.rel_pos) w.rel_pos = tape.param(*spec.rel_pos);
  return w;
}

namespace {

Var content_affinity(Var q, Var kcols, std::size_t heads, std::size_t taps) {
  Tensor qv = q.value(), kv = kcols.value();
  Tensor out = detail::content_affinity(qv, kv, heads, taps);
  return q.tape().record("content_affinity", {q, kcols}, std::move(out), [qv, kv, heads, taps](const Tensor& g, Needed) {
    const std::size_t B = qv.dim(0), C = qv.dim(1), L = qv.dim(2) * qv.dim(3), Ch = C / heads;
    Tensor gq = Tensor::zeros(qv.shape()), gk = Tensor::zeros(kv.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t h = c / Ch;
        for (std::size_t t = 0; t < taps; ++t) {
          const std::size_t arow = ((b * heads + h) * taps + t) * L;
          const std::size_t krow = ((b * C + c) * taps + t) * L;
          const std::size_t qrow = (b * C + c) * L;
          for (std::size_t l = 0; l < L; ++l) {
            gq[qrow + l] += g[arow + l] * kv[krow + l];
            gk[krow + l] = g[arow + l] * qv[qrow + l];
          }
        }
      }
    return Grads{std::move(gq), std::move(gk)};
  });
}

Var position_affinity(Var q, Var rel, std::size_t heads) {
  Tensor qv = q.value(), rv = rel.value();
  Tensor out = detail::position_affinity(qv, rv, heads);
  return q.tape().record("position_affinity", {q, rel}, std::move(out), [qv, rv, heads](const Tensor& g, Needed) {
    const std::size_t B = qv.dim(0), C = qv.dim(1), L = qv.dim(2) * qv.dim(3), Ch = C / heads;
    const std::size_t taps = rv.dim(0);
    Tensor gq = Tensor::zeros(qv.shape()), gr = Tensor::zeros(rv.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t h = c / Ch, cc = c % Ch;
        const std::size_t qrow = (b * C + c) * L;
        for (std::size_t t = 0; t < taps; ++t) {
          const std::size_t arow = ((b * heads + h) * taps + t) * L;
          double acc = 0.0;
          for (std::size_t l = 0; l < L; ++l) {
            gq[qrow + l] += g[arow + l] * rv[t * Ch + cc];
            acc += g[arow + l] * qv[qrow + l];
          }
          gr[t * Ch + cc] += acc;
        }
      }
    return Grads{std::move(gq), std::move(gr)};
  });
}

}  // namespace

Var attention_affinity(Var x, const AttentionConfig& config, const AttentionVars& w) {
  config.validate();
  if (x.shape().size() != 4 || x.shape()[1] != config.channels) {
    throw ShapeError("local_self_attention: input " + shape_to_string(x.shape()) + " does not match C=" +
                     std::to_string(config.channels));
  }
  const Window win = config.unfold_window();
  Var q = linear_1x1(avg_pool2d(x, config.stride), w.query, Var());
  if (window_out(x.shape()[2], win) != q.shape()[2] || window_out(x.shape()[3], win) != q.shape()[3]) {
    throw ShapeError("local_self_attention: pooled query grid does not match the strided window grid");
  }
  Var a = config.mode == AttentionMode::kContent
              ? content_affinity(q, unfold(linear_1x1(x, w.key, Var()), win), config.heads,
                                 config.window * config.window)
              : position_affinity(q, w.rel_pos, config.heads);
  if (config.softmax) a = softmax(a, 2);
  return a;
}

Var local_self_attention(Var x, const AttentionConfig& config, const AttentionVars& w) {
  Var affinity = attention_affinity(x, config, w);
  return involution_mac(linear_1x1(x, w.value, Var()), affinity, config.unfold_window());
}

Var local_self_attention(Var x, AttentionSpec& spec) {
  return local_self_attention(x, spec.config, bind(x.tape(), spec));
}

Var cross_entropy(Var logits, const std::vector<std::size_t>& labels, double label_smoothing) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) throw ShapeError("cross_entropy: logits must be (B, classes)");
  const std::size_t B = z.dim(0), K = z.dim(1);
  Tensor target = Tensor::full({B, K}, label_smoothing / static_cast<double>(K));
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] >= K) throw std::out_of_range("cross_entropy: label out of range");
    target[b * K + labels[b]] += 1.0 - label_smoothing;
  }
  const Tensor p = ops::softmax(z, 1);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = z[b * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[b * K + k]);
    double lse = 0.0;
    for (std::size_t k = 0; k < K; ++k) lse += std::exp(z[b * K + k] - mx);
    lse = mx + std::log(lse);
    for (std::size_t k = 0; k < K; ++k) loss -= target[b * K + k] * (z[b * K + k] - lse);
  }
  loss /= static_cast<double>(B);
  return logits.tape().record("cross_entropy", {logits}, Tensor::scalar(loss), [p, target, B](const Tensor& g, Needed) {
    Tensor gz = sub(p, target);
    return Grads{scale(gz, g.item() / static_cast<double>(B))};
  });
}

namespace {

Window window_from(const Attrs& a, std::size_t kernel_default = 3) {
  const std::size_t k = attr_size(a, "kernel", kernel_default);
  const std::size_t d = attr_size(a, "dilation", 1);
  Window w{k, attr_size(a, "stride", 1), d, 0};
  w.padding = attr_size(a, "padding", (k / 2) * d);
  return w;
}

InvolutionConfig involution_config_from(const Attrs& a, std::size_t channels, std::size_t reduced) {
  InvolutionConfig cfg;
  cfg.channels = channels;
  cfg.kernel = attr_size(a, "kernel", 3);
  cfg.stride = attr_size(a, "stride", 1);
  cfg.dilation = attr_size(a, "dilation", 1);
  cfg.groups = attr_size(a, "groups", 1);
  cfg.reduction = channels / reduced;
  cfg.softmax_kernel = attr(a, "softmax", 0.0) != 0.0;
  return cfg;
}

AttentionConfig attention_config_from(const Attrs& a, std::size_t channels, AttentionMode mode) {
  AttentionConfig cfg;
  cfg.channels = channels;
  cfg.window = attr_size(a, "window", 3);
  cfg.heads = attr_size(a, "heads", 1);
  cfg.stride = attr_size(a, "stride", 1);
  cfg.mode = mode;
  cfg.softmax = attr(a, "softmax", 0.0) != 0.0;
  return cfg;
}

OpRegistry make_registry() {
  OpRegistry reg = ad::core_registry();
  using In = std::span<const Var>;
  reg.add({"unfold", {"x"}, [](Tape&, In in, const Attrs& a) { return unfold(in[0], window_from(a)); }});
  reg.add({"avg_pool2d", {"x"}, [](Tape&, In in, const Attrs& a) { return avg_pool2d(in[0], attr_size(a, "stride", 2)); }});
  reg.add({"max_pool2d", {"x"}, [](Tape&, In in, const Attrs& a) {
             return max_pool2d(in[0], attr_size(a, "kernel", 3), attr_size(a, "stride", 2), attr_size(a, "padding", 1));
           }});
  reg.add({"conv2d", {"x", "filters", "bias"}, [](Tape&, In in, const Attrs& a) {
             return conv2d(in[0], in[1], in[2], window_from(a, in[1].shape()[2]), attr_size(a, "groups", 1));
           }});
  reg.add({"depthwise_conv2d", {"x", "filters"}, [](Tape&, In in, const Attrs& a) {
             if (in[1].shape()[0] != in[0].shape()[1] || in[1].shape()[1] != 1) {
               throw ShapeError("depthwise_conv2d: filters must be (C, 1, K, K)");
             }
             return conv2d(in[0], in[1], Var(), window_from(a, in[1].shape()[2]), in[0].shape()[1]);
           }});
  reg.add({"linear_1x1", {"x", "weight", "bias"}, [](Tape&, In in, const Attrs&) { return linear_1x1(in[0], in[1], in[2]); }});
  reg.add({"linear", {"x", "weight", "bias"}, [](Tape&, In in, const Attrs&) { return linear(in[0], in[1], in[2]); }});
  reg.add({"batch_norm", {"x", "gamma", "beta"}, [](Tape&, In in, const Attrs& a) {
             BatchNormState state("grad_check.bn", in[0].shape()[1]);
             state.mode = attr(a, "eval", 0.0) != 0.0 ? BnMode::kEval : BnMode::kTrain;
             return batch_norm(in[0], in[1], in[2], state);
           }});
  reg.add({"softmax", {"x"}, [](Tape&, In in, const Attrs& a) { return softmax(in[0], attr_size(a, "axis", 1)); }});
  reg.add({"global_avg_pool", {"x"}, [](Tape&, In in, const Attrs&) { return global_avg_pool(in[0]); }});
  reg.add({"involution_mac", {"x", "kernel"}, [](Tape&, In in, const Attrs& a) {
             return involution_mac(in[0], in[1], window_from(a));
           }});
  auto involution_inputs = [](In in, const Attrs& a, InvolutionConfig& cfg, InvolutionVars& w) {
    cfg = involution_config_from(a, in[0].shape()[1], in[1].shape()[0]);
    w = InvolutionVars{in[1], in[2], in[3], in[4], in[5]};
  };
  reg.add({"kernel_generate", {"x", "reduce", "bn_gamma", "bn_beta", "span", "span_bias"},
           [involution_inputs](Tape&, In in, const Attrs& a) {
             InvolutionConfig cfg;
             InvolutionVars w;
             involution_inputs(in, a, cfg, w);
             BatchNormState bn("grad_check.bn", cfg.reduced_channels());
             return kernel_generate(in[0], cfg, w, &bn);
           }});
  reg.add({"involution", {"x", "reduce", "bn_gamma", "bn_beta", "span", "span_bias"},
           [involution_inputs](Tape&, In in, const Attrs& a) {
             InvolutionConfig cfg;
             InvolutionVars w;
             involution_inputs(in, a, cfg, w);
             BatchNormState bn("grad_check.bn", cfg.reduced_channels());
             return involution_mac(in[0], kernel_generate(in[0], cfg, w, &bn), cfg.window());
           }});
  reg.add({"local_self_attention", {"x", "query", "key", "value"}, [](Tape&, In in, const Attrs& a) {
             const AttentionConfig cfg = attention_config_from(a, in[0].shape()[1], AttentionMode::kContent);
             return local_self_attention(in[0], cfg, AttentionVars{in[1], in[2], in[3], Var()});
           }});
  reg.add({"positional_self_attention", {"x", "query", "value", "rel_pos"}, [](Tape&, In in, const Attrs& a) {
             const AttentionConfig cfg = attention_config_from(a, in[0].shape()[1], AttentionMode::kPosition);
             return local_self_attention(in[0], cfg, AttentionVars{in[1], Var(), in[2], in[3]});
           }});
  reg.add({"cross_entropy", {"logits"}, [](Tape&, In in, const Attrs& a) {
             std::vector<std::size_t> labels(in[0].shape()[0]);
             for (std::size_t b = 0; b < labels.size(); ++b) {
               labels[b] = attr_size(a, "label" + std::to_string(b), b % in[0].shape()[1]);
             }
             return cross_entropy(in[0], labels, attr(a, "label_smoothing", 0.0));
           }});
  return reg;
}

}  // namespace

const OpRegistry& registry() {
  static const OpRegistry reg = make_registry();
  return reg;
}

}  // namespace involution::nn
