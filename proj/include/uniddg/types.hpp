#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uniddg/tensor.hpp"

namespace uniddg {

// One image is one domain: the center label is carried for reporting
// only and never consumed by the training math.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;  // HWC, 3 channels, values in [-1, 1]
  std::string id;
  std::string center;

  double& at(int h, int w, int c) { return pixels[(static_cast<size_t>(h) * width + w) * 3 + c]; }
  double at(int h, int w, int c) const {
    return pixels[(static_cast<size_t>(h) * width + w) * 3 + c];
  }
  static Image blank(int h, int w, double fill = 0.0) {
    Image im;
    im.height = h;
    im.width = w;
    im.pixels.assign(static_cast<size_t>(h) * w * 3, fill);
    return im;
  }
};

struct LabelMask {
  int height = 0;
  int width = 0;
  int num_classes = 2;  // class 0 is background
  std::vector<std::uint8_t> labels;  // HW

  std::uint8_t& at(int h, int w) { return labels[static_cast<size_t>(h) * width + w]; }
  std::uint8_t at(int h, int w) const { return labels[static_cast<size_t>(h) * width + w]; }
  static LabelMask blank(int h, int w, int classes) {
    LabelMask m;
    m.height = h;
    m.width = w;
    m.num_classes = classes;
    m.labels.assign(static_cast<size_t>(h) * w, 0);
    return m;
  }
};

// Per-pixel class distribution; each pixel's values sum to 1.
struct ProbMap {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<double> probs;  // HWC

  double at(int h, int w, int c) const {
    return probs[(static_cast<size_t>(h) * width + w) * num_classes + c];
  }
};

// Domain-invariant anatomical representation, tanh range (-1, 1).
struct ContentMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> values;  // HWC
};

struct StyleCode {
  std::vector<double> values;
};

// Gaussian parameters predicted by the style encoder; the variance is
// stored as log-variance so sigma > 0 is structural.
struct StyleParams {
  std::vector<double> mean;
  std::vector<double> log_variance;
};

struct ExpansionMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;  // HW, values in {0, 1}

  std::uint8_t at(int h, int w) const { return mask[static_cast<size_t>(h) * width + w]; }
};

struct Batch {
  std::vector<Image> images;
  std::vector<LabelMask> masks;
  size_t size() const { return images.size(); }
};

// Throws ShapeError/RangeError naming the offending index when any
// Batch invariant fails. Side-effect free.
void validate_batch(const Batch& batch);

// NCHW conversions used by the networks and the training engine.
Tensor images_to_tensor(const std::vector<Image>& images);
Tensor image_to_tensor(const Image& image);
Image tensor_to_image(const Tensor& t, int n);
Tensor masks_to_onehot(const std::vector<LabelMask>& masks, int num_classes);
ProbMap tensor_to_probmap(const Tensor& t, int n);
ContentMap tensor_to_content(const Tensor& t, int n);

}  // namespace uniddg
