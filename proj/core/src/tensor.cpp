#include "mspcaps/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "mspcaps/errors.hpp"

namespace mspcaps {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "," : "") << shape[i];
    }
    out << ')';
    return out.str();
}

namespace {
thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_sequence{0};

void check_shape(const Shape& shape) {
    for (auto e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
        }
    }
}
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace detail {

std::uint64_t next_sequence() { return ++g_sequence; }

template <typename T>
std::vector<T>& grad_buffer(Node<T>& node) {
    if (node.grad.empty()) {
        node.grad.assign(node.data.size(), T(0));
    }
    return node.grad;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = next_sequence();
    node->op = op;
    const bool needs = grad_enabled() && std::any_of(inputs.begin(), inputs.end(),
                                                     [](const auto& n) { return n->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
    }
    return Tensor<T>::from_node(std::move(node));
}

template std::vector<float>& grad_buffer(Node<float>&);
template std::vector<double>& grad_buffer(Node<double>&);
template Tensor<float> make_result(Shape, std::vector<float>, const char*,
                                   std::vector<std::shared_ptr<Node<float>>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*,
                                    std::vector<std::shared_ptr<Node<double>>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

template <typename T>
Tensor<T>::Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
    check_shape(shape);
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_sequence();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(1), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<detail::Node<T>> node) {
    return Tensor(std::move(node));
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw AxisError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
    if (!is_leaf()) {
        throw ContractError("requires_grad can only be changed on leaf tensors");
    }
    node_->requires_grad = value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
    return detail::grad_buffer(*node_);
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() requires a single-element root, got shape " + shape_str(shape()));
    }
    using NodePtr = detail::Node<T>*;
    std::vector<NodePtr> order;
    std::unordered_set<NodePtr> seen;
    std::vector<NodePtr> stack{node_.get()};
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) {
            continue;
        }
        order.push_back(n);
        for (const auto& in : n->inputs) {
            stack.push_back(in.get());
        }
    }
    std::sort(order.begin(), order.end(), [](NodePtr a, NodePtr b) { return a->seq > b->seq; });

    // Interior grads are recomputed from scratch on every call; leaves accumulate.
    for (NodePtr n : order) {
        if (n->backward) {
            n->grad.assign(n->data.size(), T(0));
        } else {
            detail::grad_buffer(*n);
        }
    }
    if (order.empty()) {
        return;
    }
    node_->grad[0] += T(1);
    for (NodePtr n : order) {
        if (n->backward) {
            n->backward(*n);
        }
    }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(shape(), node_->data, false);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mspcaps
