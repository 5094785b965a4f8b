#pragma once

#include <functional>
#include <vector>

#include "uniddg/tensor.hpp"

namespace uniddg {

// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Running statistics for batch normalization, owned by the layer and
// mutated by training-mode forward passes.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  void init(int channels) {
    running_mean = Tensor({channels}, 0.0);
    running_var = Tensor({channels}, 1.0);
  }
};

// Reverse-mode autodiff tape. One tape per training step: register
// leaves, build the forward graph, call backward(loss), read leaf
// gradients. Creation order is the topological order; the backward
// sweep frees intermediate buffers as it goes, so peak memory stays
// near the forward-pass footprint.
class Tape {
 public:
  // Constant leaf (no gradient).
  Var input(Tensor v);
  // Differentiable leaf; the tensor is copied onto the tape.
  Var param(const Tensor& v);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  // Elementwise product with a non-differentiable tensor of equal shape.
  Var mul_tensor(Var a, const Tensor& c);
  // NCHW * NHW mask, broadcast over channels; the mask carries no gradient.
  Var mask_channels(Var x, const Tensor& mask);
  Var leaky_relu(Var a, double slope);
  Var tanh_(Var a);

  Var concat_ch(Var a, Var b);
  Var permute_n(Var x, const std::vector<int>& perm);
  Var slice_cols(Var x, int start, int len);  // on {N,F} tensors

  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var maxpool2(Var x);
  Var upsample2(Var x);
  Var linear(Var x, Var w, Var b);
  Var global_avg_pool(Var x);
  Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training,
                 double momentum, double eps);
  Var instance_norm(Var x, double eps);
  // alpha/beta are {N,C}; normalization divides by (population std + eps).
  Var adain(Var x, Var alpha, Var beta, double eps);
  Var softmax_ch(Var x);
  // mean + exp(0.5*clamp(logvar, +-20)) * eps, elementwise on {N,Z}.
  Var reparam_sample(Var mean, Var logvar, const Tensor& eps);

  Var l1_mean(Var a, Var b);
  // Scalar projection sum(a * r) against a fixed tensor; smooth probe for tests.
  Var dot_const(Var a, const Tensor& r);
  // Soft Dice loss over foreground classes, averaged over the batch.
  Var soft_dice_loss(Var probs, const Tensor& onehot, double eps);
  Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
  bool has_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad.numel() > 0; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void()> backward;
    bool requires_grad = false;
    bool leaf = false;
  };

  std::vector<Node> nodes_;

  Var push(Tensor value, bool requires_grad, std::function<void()> bw);
  Tensor& grad_buf(int id);
  void accumulate(int id, const Tensor& g);
  bool needs(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }
  void check_same_shape(Var a, Var b, const char* op) const;
};

}  // namespace uniddg
