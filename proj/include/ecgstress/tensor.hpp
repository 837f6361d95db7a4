#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace ecgstress {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline thread_local int no_grad_depth = 0;

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

// One vertex of the tape. backward_fn reads this node's grad and accumulates
// into the parents' grads.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t id = next_node_id();
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

} // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Shared handle to a tape node. Copying a Tensor aliases the same storage;
// use clone() for an independent leaf.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (ecgstress::numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_string(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        node_->op = "leaf";
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = ecgstress::numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        const auto n = ecgstress::numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({}, {value}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    std::uint64_t id() const { return node_->id; }
    const std::string& op() const { return node_->op; }

    std::span<const double> data() const { return node_->data; }
    // Write access is for leaves only (optimizer updates, test perturbation).
    std::span<double> mutable_data() { return node_->data; }
    double item() const {
        if (numel() != 1) throw ArgumentError("item() on tensor of shape " + shape_string(shape()));
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    Tensor clone(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }
    Tensor clone() const { return clone(requires_grad()); }
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    // Reverse-mode sweep from a scalar. Every node is visited once, in reverse
    // topological order; gradients accumulate additively into existing buffers.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

    // Builds an op result. Parents are recorded only when grad mode is on and
    // at least one input requires grad.
    static Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                              std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward_fn) {
        Tensor out(std::move(shape), std::move(data));
        out.node_->op = std::move(op);
        const bool track = grad_enabled() &&
                           std::any_of(inputs.begin(), inputs.end(),
                                       [](const Tensor& t) { return t.defined() && t.requires_grad(); });
        if (track) {
            out.node_->requires_grad = true;
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
    if (numel() != 1 || rank() != 0) {
        throw ArgumentError("backward() requires a scalar loss, got shape " + shape_string(shape()));
    }
    if (!requires_grad()) return;

    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::vector<detail::Node*> order;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (!node->backward_fn || node->grad.empty()) continue;
        for (auto& p : node->parents) {
            if (p->requires_grad) p->ensure_grad();
        }
        node->backward_fn(*node);
    }
}

} // namespace ecgstress
