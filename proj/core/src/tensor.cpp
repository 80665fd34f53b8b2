#include "mman/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mman {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {
void validate_extents(const Shape& shape) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor shape has a zero extent: " + shape_str(shape));
    }
}
} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    validate_extents(shape);
    auto node = std::make_shared<TensorNode>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), fill);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    validate_extents(shape);
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item(): tensor has " + std::to_string(numel()) +
                            " elements, expected 1");
    }
    return node_->value[0];
}

bool Tensor::all_finite() const {
    for (double v : node_->value) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar tensor");
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

} // namespace mman
