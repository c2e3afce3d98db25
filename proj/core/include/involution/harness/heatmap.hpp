#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>

#include "involution/rednet.hpp"
#include "involution/tensor.hpp"

namespace involution::harness {

/// Representative value of every generated kernel: the sum of its K*K taps.
/// `image` is (1, 3, H, W); the result is (G, H', W'). Throws LayerError if
/// `layer` is not an involution layer of the network.
Tensor kernel_heat_maps(const Network& net, const Tensor& image, std::string_view layer);

/// Makes every kernel of `layer` the constant c: zero span weights, span
/// bias c. Softmax over taps is switched off.
void force_constant_kernel(Network& net, std::string_view layer, double c);

/// group,row,col,value with values printed round-trip exact.
void write_heatmap_csv(std::ostream& os, const Tensor& maps);

/// Binary 8-bit PGM of one group, min-max scaled to [0, 255] and rounded.
/// A flat map is written as all zeros.
std::string encode_pgm(const Tensor& maps, std::size_t group);

/// Binary PPM (P6, maxval 255) as a (1, 3, H, W) tensor scaled to [0, 1].
Tensor read_ppm(std::istream& is);

}  // namespace involution::harness
