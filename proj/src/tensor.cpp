#include "dsp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dsp/errors.hpp"

namespace dsp {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (const auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

void set_grad_enabled(bool on) { g_grad_enabled = on; }

} // namespace detail

NoGradGuard::NoGradGuard() : saved_(detail::grad_enabled()) {
    detail::set_grad_enabled(false);
}

NoGradGuard::~NoGradGuard() { detail::set_grad_enabled(saved_); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
                     requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->data.size()); }

std::int64_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(node_->shape));
    }
    return node_->shape[axis];
}

std::size_t Tensor::rank() const { return node_->shape.size(); }

std::vector<double>& Tensor::data() { return node_->data; }

const std::vector<double>& Tensor::data() const { return node_->data; }

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value() requires a scalar tensor, got shape " +
                            shape_to_string(node_->shape));
    }
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::vector<double>& Tensor::grad() {
    node_->ensure_grad();
    return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_ && !node_->grad.empty()) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

Tensor Tensor::detach() const {
    return from_data(node_->shape, node_->data, false);
}

void Tensor::backward() const {
    if (!node_) throw ContractError("backward on an undefined tensor");
    if (numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_to_string(node_->shape));
    }
    if (!node_->requires_grad) return; // nothing reachable participates

    // Iterative post-order DFS: children recorded after all their parents.
    std::vector<detail::TensorNode*> order;
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    std::unordered_set<detail::TensorNode*> seen;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            detail::TensorNode* p = n->parents[next].get();
            ++next;
            if (seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Intermediate grads are scratch per pass; leaves accumulate across calls.
    for (auto* n : order) {
        if (n->backward_fn) {
            n->grad.assign(n->data.size(), 0.0);
        } else {
            n->ensure_grad();
        }
    }
    node_->ensure_grad();
    node_->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

Tensor Tensor::make(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                    std::function<void(detail::TensorNode&)> backward_fn) {
    Tensor out = from_data(std::move(shape), std::move(data), false);
    if (!detail::grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) {
        if (in.defined() && in.requires_grad()) {
            out.node_->parents.push_back(in.node());
            any = true;
        }
    }
    if (any) {
        out.node_->requires_grad = true;
        out.node_->backward_fn = std::move(backward_fn);
    } else {
        out.node_->parents.clear();
    }
    return out;
}

bool all_finite(const Tensor& t) {
    for (const double v : t.data()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace dsp
