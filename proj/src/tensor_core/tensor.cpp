#include "mcfnet/tensor.hpp"

#include <sstream>

namespace mcfnet {

std::string to_string(DType dtype) {
  return dtype == DType::float32 ? "float32" : "float64";
}

DType dtype_from_string(const std::string& name) {
  if (name == "float32") return DType::float32;
  if (name == "float64") return DType::float64;
  throw ShapeError("unknown dtype '" + name + "'");
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace mcfnet
