#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mipr/nn/tensor.hpp"

namespace mipr::nn {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    /// Zero-initialized on first use.
    Tensor& grad_buffer();
    void accumulate(const Tensor& g);
};

}  // namespace detail

/// Handle to a node in the reverse-mode tape. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Empty tensor when no gradient has reached this node.
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_grad() { return node_->grad_buffer(); }
    void zero_grad();

    double item() const { return node_->value[0]; }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Records an op result. `fn` receives the result node and pushes gradients
/// into `self.parents`, which are the nodes of `inputs` in order.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node& self)> fn);

/// Runs reverse accumulation from a scalar root (seed gradient 1).
void backward(const Var& root);

Var detach(const Var& x);
Var constant(Tensor value);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }

/// x (N,C,H,W) scaled by a per-position gate (N,1,H,W).
Var mul_gate(const Var& x, const Var& gate);

Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
/// exp(x) - 1 below zero; continuously differentiable.
Var elu(const Var& x);

// Spatial
/// Zero-padded 2-D convolution; `bias` may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
Var upsample_nearest(const Var& x, int factor);
Var avg_pool(const Var& x, int size);
Var max_pool(const Var& x, int size);
Var concat_channels(const Var& a, const Var& b);

/// Per-channel batch normalization with affine. Running statistics are
/// updated in training mode and used otherwise.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps);

// Reductions and losses (scalar outputs)
Var sum(const Var& x);
Var mean(const Var& x);
Var softmax_channels(const Var& x);
/// Mean pixelwise cross-entropy; labels are N*H*W class ids.
Var cross_entropy(const Var& logits, std::span<const int> labels);
/// 1 - soft Dice of the foreground channel (class 1) against labels.
Var soft_dice_loss(const Var& probs, std::span<const int> labels, double smooth = 1.0);
Var l1_loss(const Var& a, const Var& b);

}  // namespace mipr::nn
