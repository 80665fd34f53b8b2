#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mman/common.hpp"

namespace mman {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Shared storage behind a Tensor handle. Values are 64-bit floats in
// row-major order; the gradient buffer is allocated on demand and has the
// same layout as the values.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double fill, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    // Uniform in [lo, hi); draws numel values from rng in row-major order.
    static Tensor uniform(Shape shape, double lo, double hi,
                          std::mt19937_64& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    // Gradient buffer; allocated (zero) on first access.
    std::vector<double>& grad() { node_->ensure_grad(); return node_->grad; }
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    // Value of a 1-element tensor.
    double item() const;

    // True when every value is finite.
    bool all_finite() const;

    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;
};

// Records backward steps for one forward pass. Replay is strictly reverse
// execution order, so gradient accumulation order is fixed run to run.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_step) {
        steps_.push_back(std::move(backward_step));
    }

    std::size_t op_count() const { return steps_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every recorded step once, in
    // reverse order. Gradients of tensors not reachable from `loss` stay 0.
    void backward(const Tensor& loss);

    static Tape* active();

private:
    friend class TapeScope;
    std::vector<std::function<void()>> steps_;
};

// Makes a tape the active recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

} // namespace mman
