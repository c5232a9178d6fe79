#include "fencepipe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "fencepipe/error.hpp"

namespace fencepipe {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            os << ',';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

std::vector<double>& Node::ensure_grad() {
    if (grad.size() != data.size()) {
        grad.assign(data.size(), 0.0);
    }
    return grad;
}

std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

Tensor::Tensor() : Tensor(Shape{0}) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->seq = detail::next_seq();
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->seq = detail::next_seq();
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

void Tensor::zero_grad() {
    if (has_grad()) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

void Tensor::clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad());
    return t;
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

Tape Tape::record(const Tensor& root) {
    Tape tape;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{root.node().get()};
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) {
            continue;
        }
        tape.nodes_.push_back(n);
        for (const auto& p : n->parents) {
            stack.push_back(p.get());
        }
    }
    // Sequence numbers are assigned at creation, so an op always follows its
    // inputs.
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq < b->seq; });
    return tape;
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() needs a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw ContractError("backward() on a tensor that does not require grad");
    }
    const Tape tape = Tape::record(loss);
    for (detail::Node* n : tape.nodes()) {
        if (!n->is_leaf()) {
            n->grad.assign(n->data.size(), 0.0);
        }
    }
    loss.node()->ensure_grad()[0] += 1.0;
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        if (!(*it)->is_leaf()) {
            (*it)->backward_fn(**it);
        }
    }
}

}  // namespace fencepipe
