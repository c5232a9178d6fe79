#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fencepipe {

/// Dimensions, outermost first. Feature maps are [height, width, channels].
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means "absent"
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents. Empty for leaves.
    std::function<void(const Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    std::vector<double>& ensure_grad();
};

std::uint64_t next_seq();

}  // namespace detail

/// Dense row-major float64 array participating in the gradient tape.
///
/// Tensor is a handle: copies share the same storage and gradient, which is
/// what lets a model hold a weight while the tape records ops on it. Use
/// clone() or detach() for an independent copy.
class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    bool empty() const { return node_->data.empty(); }

    std::span<const double> data() const { return node_->data; }
    /// In-place access. Mutating data that the tape already recorded
    /// invalidates any pending backward pass through it.
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true);

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();
    void clear_grad();

    /// New leaf with copied data and no history.
    Tensor detach() const;
    /// New leaf with copied data, keeping requires_grad.
    Tensor clone() const;

    bool is_leaf() const { return node_->is_leaf(); }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Recorded operations reachable from a root, in creation order.
class Tape {
public:
    static Tape record(const Tensor& root);

    const std::vector<detail::Node*>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<detail::Node*> nodes_;
};

/// Disables tape recording on this thread while alive (inference passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled();

private:
    bool previous_;
};

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// intermediate gradients are reset at the start of each call.
void backward(const Tensor& loss);

}  // namespace fencepipe
