#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "involution/autodiff.hpp"
#include "involution/prng.hpp"
#include "involution/tensor.hpp"

namespace involution {

/// Sliding-window geometry shared by unfold, convolution and involution.
struct Window {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;
};

/// Window with padding floor(K/2) * dilation, which keeps the spatial size
/// at stride 1. K must be odd.
Window same_window(std::size_t kernel, std::size_t stride = 1, std::size_t dilation = 1);

/// floor((in + 2p - d(K-1) - 1) / s) + 1. Throws ShapeError if the window
/// does not fit.
std::size_t window_out(std::size_t in, const Window& w);

enum class BnMode { kTrain, kEval };

struct BatchNormState {
  BatchNormState() = default;
  BatchNormState(const std::string& name, std::size_t channels);

  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  BnMode mode = BnMode::kTrain;

  std::size_t channels() const { return gamma.numel(); }
};

struct ConvConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool bias = false;

  Window window() const { return same_window(kernel, stride, dilation); }
  void validate() const;
};

struct ConvSpec {
  ConvConfig config;
  Parameter filters;  // (C_o, C_i / groups, K, K)
  std::optional<Parameter> bias;
};

ConvSpec make_conv(const std::string& name, const ConvConfig& config, Prng& rng);

/// Form of the kernel generation function: W1 relu(BN(W0 x)) + b, or a
/// single linear map W x + b.
enum class KernelForm { kBottleneck, kSingleLinear };

struct InvolutionConfig {
  std::size_t channels = 0;
  std::size_t kernel = 7;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  std::size_t reduction = 4;
  KernelForm form = KernelForm::kBottleneck;
  /// Softmax over the K*K taps of every generated kernel. Off by default;
  /// exists for the output-activation ablation.
  bool softmax_kernel = false;

  std::size_t reduced_channels() const { return channels / reduction; }
  std::size_t taps() const { return kernel * kernel; }
  Window window() const { return same_window(kernel, stride, dilation); }
  void validate() const;
};

struct InvolutionSpec {
  InvolutionConfig config;
  std::optional<Parameter> reduce;   // W0: (C/r, C), bottleneck form only
  std::optional<BatchNormState> bn;  // over C/r, bottleneck form only
  Parameter span;                    // W1: (K*K*G, C/r) or (K*K*G, C)
  Parameter span_bias;               // (K*K*G)
};

InvolutionSpec make_involution(const std::string& name, const InvolutionConfig& config, Prng& rng);

enum class AttentionMode { kContent, kPosition };

struct AttentionConfig {
  std::size_t channels = 0;
  std::size_t window = 7;
  std::size_t heads = 1;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  AttentionMode mode = AttentionMode::kContent;
  /// Normalize affinities over the window. Off by default: affinities are
  /// the raw query-key products.
  bool softmax = false;

  Window unfold_window() const { return same_window(window, stride, dilation); }
  void validate() const;
};

struct AttentionSpec {
  AttentionConfig config;
  Parameter query;                  // (C, C)
  Parameter key;                    // (C, C), content mode
  Parameter value;                  // (C, C)
  std::optional<Parameter> rel_pos;  // (K*K, C / heads), position mode
};

AttentionSpec make_attention(const std::string& name, const AttentionConfig& config, Prng& rng);

/// Every trainable tensor of a spec, in a stable order.
std::vector<Parameter*> parameters_of(ConvSpec& spec);
std::vector<Parameter*> parameters_of(BatchNormState& state);
std::vector<Parameter*> parameters_of(InvolutionSpec& spec);
std::vector<Parameter*> parameters_of(AttentionSpec& spec);

// Pure tensor kernels and their gradient rules. Feature maps are
// (B, C, H, W); nothing here records on a tape.
namespace ops {

/// (B, C, H, W) -> (B, C*K*K, L), L = H_out * W_out. Row c*K*K + ki*K + kj
/// holds tap (ki, kj) of channel c; padding is zero.
Tensor unfold(const Tensor& x, const Window& w);
/// Adjoint of unfold: scatters columns back and sums overlaps.
Tensor fold(const Tensor& cols, const Shape& x_shape, const Window& w);

/// Non-overlapping s x s mean; H and W must be divisible by s.
Tensor avg_pool2d(const Tensor& x, std::size_t s);
Tensor avg_pool2d_backward(const Tensor& grad_out, const Shape& x_shape, std::size_t s);

struct MaxPoolResult {
  Tensor out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};
MaxPoolResult max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding);
Tensor max_pool2d_backward(const Tensor& grad_out, const std::vector<std::size_t>& argmax, const Shape& x_shape);

Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor* bias, const Window& w, std::size_t groups);
Tensor conv2d(const Tensor& x, const ConvSpec& spec);

struct Conv2dGrads {
  Tensor x;
  Tensor filters;
  Tensor bias;
};
Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& filters, bool has_bias, const Window& w,
                            std::size_t groups, const Tensor& grad_out, bool need_x = true);

/// Grouped convolution with groups == C_i == C_o; rejects anything else.
Tensor depthwise_conv2d(const Tensor& x, const ConvSpec& spec);

/// 1x1 projection: (B, C_i, H, W) with W: (C_o, C_i) -> (B, C_o, H, W).
Tensor linear_1x1(const Tensor& x, const Tensor& weight, const Tensor* bias);
struct Linear1x1Grads {
  Tensor x;
  Tensor weight;
  Tensor bias;
};
Linear1x1Grads linear_1x1_backward(const Tensor& x, const Tensor& weight, bool has_bias, const Tensor& grad_out,
                                   bool need_x = true);

/// Dense layer on (B, C_i) with W: (C_o, C_i).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias);

/// Normalizes with batch statistics over (B, H, W) in train mode and
/// updates the running estimates; uses running estimates in eval mode.
Tensor batch_norm(const Tensor& x, BatchNormState& state);
/// As batch_norm but never touches the running estimates.
Tensor batch_norm_apply(const Tensor& x, const BatchNormState& state);
Tensor batch_norm_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta, const BatchNormState& state);
/// Momentum update of the running estimates from the batch moments of x.
/// Running variance takes the unbiased batch variance.
void batch_norm_update_running(const Tensor& x, BatchNormState& state);
/// Per-channel batch mean and biased variance over (B, H, W).
void batch_moments(const Tensor& x, Tensor& mean, Tensor& var);

Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor softmax_backward(const Tensor& y, const Tensor& grad_out, std::size_t axis);

/// (B, C, H, W) -> (B, C).
Tensor global_avg_pool(const Tensor& x);

/// Kernel generation: optional s x s average pool, then W1 relu(BN(W0 x)) + b
/// per pixel (or W x + b), reshaped to (B, G, K*K, H_out, W_out).
Tensor kernel_generate(const Tensor& x, const InvolutionSpec& spec);

/// Y[b, c, l] = sum over taps o of kernel[b, g(c), o, l] * patch[b, c, o, l],
/// with channels split into G contiguous groups. The kernel group count is
/// read from its shape.
Tensor involution_mac(const Tensor& x, const Tensor& kernel, const Window& w);
struct InvolutionMacGrads {
  Tensor x;
  Tensor kernel;
};
InvolutionMacGrads involution_mac_backward(const Tensor& x, const Tensor& kernel, const Window& w,
                                           const Tensor& grad_out, bool need_x = true);

Tensor involution(const Tensor& x, const InvolutionSpec& spec);

/// Windowed affinities (B, heads, K*K, H_out, W_out): query times key
/// (content mode) or query times position table (position mode).
Tensor attention_affinity(const Tensor& x, const AttentionSpec& spec);
/// Value projection of x, (B, C, H, W).
Tensor attention_values(const Tensor& x, const AttentionSpec& spec);
/// involution_mac(values, affinity) with one kernel group per head.
Tensor local_self_attention(const Tensor& x, const AttentionSpec& spec);

}  // namespace ops

// Tape-recording versions. Gradients flow into every Var argument.
namespace nn {

Var unfold(Var x, const Window& w);
Var avg_pool2d(Var x, std::size_t s);
Var max_pool2d(Var x, std::size_t kernel, std::size_t stride, std::size_t padding);
/// `bias` may be a default-constructed (invalid) Var.
Var conv2d(Var x, Var filters, Var bias, const Window& w, std::size_t groups);
Var conv2d(Var x, ConvSpec& spec);
Var depthwise_conv2d(Var x, ConvSpec& spec);
Var linear_1x1(Var x, Var weight, Var bias);
Var linear(Var x, Var weight, Var bias);
/// Uses `state` for mode, eps, momentum and running estimates; gamma and
/// beta come from the Vars.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state);
Var batch_norm(Var x, BatchNormState& state);
Var relu(Var x);
Var softmax(Var x, std::size_t axis);
Var global_avg_pool(Var x);

struct InvolutionVars {
  Var reduce;  // invalid for the single-linear form
  Var bn_gamma;
  Var bn_beta;
  Var span;
  Var span_bias;
};
InvolutionVars bind(Tape& tape, InvolutionSpec& spec);

Var kernel_generate(Var x, const InvolutionConfig& config, const InvolutionVars& w, BatchNormState* bn);
Var kernel_generate(Var x, InvolutionSpec& spec);
Var involution_mac(Var x, Var kernel, const Window& w);
Var involution(Var x, InvolutionSpec& spec);

struct AttentionVars {
  Var query;
  Var key;  // invalid in position mode
  Var value;
  Var rel_pos;  // invalid in content mode
};
AttentionVars bind(Tape& tape, AttentionSpec& spec);
Var attention_affinity(Var x, const AttentionConfig& config, const AttentionVars& w);
Var local_self_attention(Var x, const AttentionConfig& config, const AttentionVars& w);
Var local_self_attention(Var x, AttentionSpec& spec);

/// Mean cross-entropy of logits (B, classes) against integer labels with
/// optional label smoothing.
Var cross_entropy(Var logits, const std::vector<std::size_t>& labels, double label_smoothing = 0.0);

/// Core ops plus every operator above, for grad_check and by-name dispatch.
const OpRegistry& registry();

}  // namespace nn

}  // namespace involution
