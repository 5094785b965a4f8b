#include "uniddg/tensor.hpp"

#include <sstream>

namespace uniddg {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<int> s, double fill)
    : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

double& Tensor::at4(int n, int c, int h, int w) {
  const std::int64_t C = shape[1], H = shape[2], W = shape[3];
  return data[static_cast<size_t>(((n * C + c) * H + h) * W + w)];
}

double Tensor::at4(int n, int c, int h, int w) const {
  const std::int64_t C = shape[1], H = shape[2], W = shape[3];
  return data[static_cast<size_t>(((n * C + c) * H + h) * W + w)];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data = {v};
  return t;
}

}  // namespace uniddg
