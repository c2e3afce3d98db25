#pragma once

#include <cstddef>

#include "involution/tensor.hpp"

// Affinity arithmetic shared by the pure and tape-recording attention paths
// so both produce bit-identical values.
namespace involution::detail {

/// q: (B, C, Ho, Wo), kcols: (B, C*taps, Ho*Wo) -> (B, heads, taps, Ho, Wo).
Tensor content_affinity(const Tensor& q, const Tensor& kcols, std::size_t heads, std::size_t taps);
/// q: (B, C, Ho, Wo), rel: (taps, C/heads) -> (B, heads, taps, Ho, Wo).
Tensor position_affinity(const Tensor& q, const Tensor& rel, std::size_t heads);

}  // namespace involution::detail
