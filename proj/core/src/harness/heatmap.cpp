#include "involution/harness/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>

namespace involution::harness {

Tensor kernel_heat_maps(const Network& net, const Tensor& image, std::string_view layer) {
  if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("heat maps take a single (1, 3, H, W) image");
  const Tensor kernels = net.extract_kernels(image, layer);  // (1, G, K*K, H', W')
  const Tensor maps = reduce_sum(kernels, {2});
  return reshape(maps, {maps.dim(1), maps.dim(2), maps.dim(3)});
}

void force_constant_kernel(Network& net, std::string_view layer, double c) {
  InvolutionSpec& spec = net.involution_layer(layer);
  spec.span.value = Tensor::zeros(spec.span.value.shape());
  spec.span_bias.value = Tensor::full(spec.span_bias.value.shape(), c);
  spec.config.softmax_kernel = false;
}

void write_heatmap_csv(std::ostream& os, const Tensor& maps) {
  os << "group,row,col,value\n";
  const std::size_t G = maps.dim(0), H = maps.dim(1), W = maps.dim(2);
  char line[96];
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        std::snprintf(line, sizeof line, "%zu,%zu,%zu,%.17g\n", g, i, j, maps.at({g, i, j}));
        os << line;
      }
}

std::string encode_pgm(const Tensor& maps, std::size_t group) {
  const std::size_t H = maps.dim(1), W = maps.dim(2);
  if (group >= maps.dim(0)) throw std::out_of_range("encode_pgm: group out of range");
  const auto plane = maps.data().subspan(group * H * W, H * W);
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double range = *hi - *lo;
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (double v : plane) {
    const double scaled = range > 0.0 ? std::round(255.0 * (v - *lo) / range) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(scaled)));
  }
  return out;
}

Tensor read_ppm(std::istream& is) {
  std::string magic;
  std::size_t W = 0, H = 0, maxval = 0;
  is >> magic;
  auto skip_comments = [&] {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string discard;
      std::getline(is, discard);
      is >> std::ws;
    }
  };
  skip_comments();
  is >> W;
  skip_comments();
  is >> H;
  skip_comments();
  is >> maxval;
  if (!is || magic != "P6" || maxval != 255 || W == 0 || H == 0) {
    throw std::runtime_error("read_ppm: expected a binary P6 image with maxval 255");
  }
  is.get();  // single whitespace before the raster
  std::string raster(3 * W * H, '\0');
  if (!is.read(raster.data(), static_cast<std::streamsize>(raster.size()))) {
    throw std::runtime_error("read_ppm: truncated raster");
  }
  Tensor out = Tensor::zeros({1, 3, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        out.at({0, c, i, j}) = static_cast<unsigned char>(raster[3 * (i * W + j) + c]) / 255.0;
      }
  return out;
}

}  // namespace involution::harness
