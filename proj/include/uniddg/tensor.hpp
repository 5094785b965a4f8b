#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uniddg {

// Dense row-major double tensor. Rank is dynamic; training code uses
// NCHW for feature maps, NF for vectors, {} for scalars.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  double& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

  // NCHW accessors (rank 4 only).
  double& at4(int n, int c, int h, int w);
  double at4(int n, int c, int h, int w) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v);
};

std::int64_t shape_numel(const std::vector<int>& shape);

}  // namespace uniddg
