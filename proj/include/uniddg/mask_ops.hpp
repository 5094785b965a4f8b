#pragma once

#include <cstdint>
#include <vector>

#include "uniddg/types.hpp"

namespace uniddg {

using BinaryGrid = std::vector<std::uint8_t>;  // HW, values in {0, 1}

// 1 wherever label > 0 (all foreground classes merged), else 0.
BinaryGrid binarize(const LabelMask& mask);

// Exact squared Euclidean distance to the nearest foreground pixel,
// computed with the two-pass parabolic envelope transform. Pixels of an
// all-background grid get a huge finite sentinel.
std::vector<double> distance_transform_sq(const BinaryGrid& fg, int height, int width);

// Isotropic binary dilation: output pixel is 1 iff its Euclidean
// distance to the nearest input-1 pixel is <= radius.
ExpansionMask dilate(const BinaryGrid& binary, int height, int width, double radius);

// Element-wise product broadcast over the image channels.
Image apply_mask(const Image& image, const ExpansionMask& mask);

}  // namespace uniddg
