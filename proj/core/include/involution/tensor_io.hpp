#pragma once

#include <iosfwd>
#include <string>

#include "involution/tensor.hpp"

namespace involution {

// Text dump: first line is the space-separated shape, then the values in
// row-major order with 17 significant digits, one innermost row per line.
// The reader accepts any whitespace between values.
void write_text(std::ostream& os, const Tensor& t);
Tensor read_text(std::istream& is);

void save_text(const std::string& path, const Tensor& t);
Tensor load_text(const std::string& path);

}  // namespace involution
