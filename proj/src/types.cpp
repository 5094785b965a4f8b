#include "uniddg/types.hpp"

#include <cmath>

#include "uniddg/errors.hpp"

namespace uniddg {

void validate_batch(const Batch& batch) {
  if (batch.images.empty()) throw ShapeError("batch: must contain at least one image");
  if (batch.images.size() != batch.masks.size())
    throw ShapeError("batch: " + std::to_string(batch.images.size()) + " images vs " +
                     std::to_string(batch.masks.size()) + " masks");
  for (size_t i = 0; i < batch.images.size(); ++i) {
    const Image& im = batch.images[i];
    const LabelMask& mk = batch.masks[i];
    if (im.height <= 0 || im.width <= 0)
      throw ShapeError("batch item " + std::to_string(i) + ": non-positive image size");
    if (im.pixels.size() != static_cast<size_t>(im.height) * im.width * 3)
      throw ShapeError("batch item " + std::to_string(i) + ": pixel buffer does not match H*W*3");
    if (im.height != mk.height || im.width != mk.width)
      throw ShapeError("batch item " + std::to_string(i) + ": image " + std::to_string(im.height) +
                       "x" + std::to_string(im.width) + " vs mask " + std::to_string(mk.height) +
                       "x" + std::to_string(mk.width));
    if (mk.labels.size() != static_cast<size_t>(mk.height) * mk.width)
      throw ShapeError("batch item " + std::to_string(i) + ": label buffer does not match H*W");
    for (double v : im.pixels) {
      if (!std::isfinite(v) || v < -1.0 || v > 1.0)
        throw RangeError("batch item " + std::to_string(i) + ": pixel value " + std::to_string(v) +
                         " outside [-1, 1]");
    }
    for (std::uint8_t l : mk.labels) {
      if (l >= mk.num_classes)
        throw RangeError("batch item " + std::to_string(i) + ": label " + std::to_string(l) +
                         " >= num_classes " + std::to_string(mk.num_classes));
    }
  }
}

Tensor images_to_tensor(const std::vector<Image>& images) {
  const int N = static_cast<int>(images.size());
  const int H = images[0].height, W = images[0].width;
  Tensor t({N, 3, H, W});
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        for (int c = 0; c < 3; ++c) t.at4(n, c, h, w) = images[static_cast<size_t>(n)].at(h, w, c);
  return t;
}

Tensor image_to_tensor(const Image& image) { return images_to_tensor({image}); }

Image tensor_to_image(const Tensor& t, int n) {
  Image im = Image::blank(t.dim(2), t.dim(3));
  for (int h = 0; h < im.height; ++h)
    for (int w = 0; w < im.width; ++w)
      for (int c = 0; c < 3; ++c) im.at(h, w, c) = t.at4(n, c, h, w);
  return im;
}

Tensor masks_to_onehot(const std::vector<LabelMask>& masks, int num_classes) {
  const int N = static_cast<int>(masks.size());
  const int H = masks[0].height, W = masks[0].width;
  Tensor t({N, num_classes, H, W}, 0.0);
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) t.at4(n, masks[static_cast<size_t>(n)].at(h, w), h, w) = 1.0;
  return t;
}

ProbMap tensor_to_probmap(const Tensor& t, int n) {
  ProbMap p;
  p.num_classes = t.dim(1);
  p.height = t.dim(2);
  p.width = t.dim(3);
  p.probs.resize(static_cast<size_t>(p.height) * p.width * p.num_classes);
  for (int h = 0; h < p.height; ++h)
    for (int w = 0; w < p.width; ++w)
      for (int c = 0; c < p.num_classes; ++c)
        p.probs[(static_cast<size_t>(h) * p.width + w) * p.num_classes + c] = t.at4(n, c, h, w);
  return p;
}

ContentMap tensor_to_content(const Tensor& t, int n) {
  ContentMap c;
  c.channels = t.dim(1);
  c.height = t.dim(2);
  c.width = t.dim(3);
  c.values.resize(static_cast<size_t>(c.height) * c.width * c.channels);
  for (int h = 0; h < c.height; ++h)
    for (int w = 0; w < c.width; ++w)
      for (int k = 0; k < c.channels; ++k)
        c.values[(static_cast<size_t>(h) * c.width + w) * c.channels + k] = t.at4(n, k, h, w);
  return c;
}

}  // namespace uniddg
