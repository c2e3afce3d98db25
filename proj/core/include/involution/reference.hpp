#pragma once

#include <cstddef>

#include "involution/nnops.hpp"
#include "involution/tensor.hpp"

// Direct nested-loop evaluations of the operators, written against the
// defining sums rather than unfold/GEMM. Slow; meant only as oracles.
namespace involution::reference {

Tensor conv2d(const Tensor& x, const Tensor& filters, const Tensor* bias, const Window& w, std::size_t groups);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& filters, const Window& w);

/// Per-pixel matrix algebra: pool, W0, batch norm (statistics per the
/// spec's mode), relu, W1 plus bias.
Tensor kernel_generate(const Tensor& x, const InvolutionSpec& spec);
Tensor involution_mac(const Tensor& x, const Tensor& kernel, const Window& w);
Tensor involution(const Tensor& x, const InvolutionSpec& spec);

/// Windowed attention pooled over the K x K neighborhood; zero padding
/// contributes zero keys and values.
Tensor local_self_attention(const Tensor& x, const AttentionSpec& spec);

}  // namespace involution::reference
