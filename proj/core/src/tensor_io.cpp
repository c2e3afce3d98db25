#include "involution/tensor_io.hpp"

#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace involution {

void write_text(std::ostream& os, const Tensor& t) {
  const Shape& shape = t.shape();
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? " " : "") << shape[i];
  os << '\n';
  const std::size_t row = shape.back();
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << std::setprecision(17);
  auto data = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    os << data[i] << ((i + 1) % row == 0 ? '\n' : ' ');
  }
  os.flags(flags);
  os.precision(prec);
}

Tensor read_text(std::istream& is) {
  std::string line;
  while (std::getline(is, line) && line.find_first_not_of(" \t\r") == std::string::npos) {
  }
  if (!is && line.empty()) throw std::runtime_error("tensor text: missing shape line");
  std::istringstream header(line);
  Shape shape;
  std::size_t d = 0;
  while (header >> d) shape.push_back(d);
  if (shape.empty()) throw std::runtime_error("tensor text: malformed shape line '" + line + "'");
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) {
    if (!(is >> v)) throw std::runtime_error("tensor text: truncated value list");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_text(const std::string& path, const Tensor& t) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_text(os, t);
}

Tensor load_text(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_text(is);
}

}  // namespace involution
