#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dsp {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

// One node of the implicit tape. Ops append nodes whose `parents` point at
// the differentiable inputs; reverse traversal from a scalar loss visits each
// node exactly once in reverse topological order.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // sized lazily to data.size()
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

bool grad_enabled();

} // namespace detail

// Scoped guard disabling tape recording; forwards inside build plain values.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Dense row-major tensor of 64-bit floats with reverse-mode autodiff.
// Semantics:
//   - leaf tensors with requires_grad accumulate into grad() across backward
//     calls; the caller zeroes them between optimizer steps,
//   - intermediate grads are scratch local to one backward pass,
//   - tensors not attached to a graph are plain immutable values, safe to
//     share across threads; graph execution is single-threaded per tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t dim(std::size_t axis) const;
    std::size_t rank() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    double value() const; // scalar tensors only

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);
    bool has_grad() const;
    std::vector<double>& grad(); // allocates zeros on first use
    const std::vector<double>& grad() const;
    void zero_grad();

    // Value copy detached from any graph.
    Tensor detach() const;

    // Reverse pass from a scalar loss. Every reachable op runs exactly once.
    void backward() const;

    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

    // Op constructor: wires parents and the backward closure when grad mode
    // is on and at least one input participates in the graph.
    static Tensor make(Shape shape, std::vector<double> data,
                       const std::vector<Tensor>& inputs,
                       std::function<void(detail::TensorNode&)> backward_fn);

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

bool all_finite(const Tensor& t);

} // namespace dsp
