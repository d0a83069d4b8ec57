#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mspcaps {

/// Row-major extents. An empty shape denotes a scalar.
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward reaches the node
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the grads of `inputs`.
    std::function<void(Node&)> backward;
};

}  // namespace detail

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense tensor taking part in a reverse-mode gradient graph.
///
/// A Tensor is a handle: copies share the underlying storage and graph
/// node, the way parameters are shared between a model and its optimizer.
/// Every op allocates a fresh result; there are no views.
///
/// Graph edges are recorded only when grad mode is on and at least one
/// input requires grad. Nodes carry a global creation sequence number, and
/// backward() walks reachable nodes in reverse creation order.
template <typename T>
class Tensor {
public:
    using value_type = T;

    /// Scalar zero.
    Tensor();
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    /// Extent of `axis`; negative axes count from the back.
    std::size_t dim(int axis) const;

    std::span<const T> data() const { return node_->data; }
    /// Direct write access. Only meaningful on leaves (parameters, inputs).
    std::span<T> mutable_data() { return node_->data; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    /// Allowed on leaves only.
    void set_requires_grad(bool value);
    bool is_leaf() const { return !node_->backward; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad();
    void zero_grad();

    /// Backpropagates from this single-element tensor, summing into the grad
    /// of every reachable tensor that requires grad.
    void backward() const;

    /// Same values, no graph history, requires_grad off.
    Tensor detach() const;

    const char* op_name() const { return node_->op; }
    std::uint64_t sequence() const { return node_->seq; }

    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node<T>> node);

private:
    explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

std::uint64_t next_sequence();

/// Wraps freshly computed data as an op result and, when any input requires
/// grad and recording is on, attaches the inputs and backward rule.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> inputs,
                      std::function<void(Node<T>&)> backward);

/// Grad buffer of `node`, allocated as zeros on first use.
template <typename T>
std::vector<T>& grad_buffer(Node<T>& node);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mspcaps
