#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "quietread/errors.hpp"

namespace quietread {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Row-major 2-D grid of plain values; used for token ids and boolean masks
// that never carry gradients.
template <typename E>
struct Grid {
    std::size_t rows{0};
    std::size_t cols{0};
    std::vector<E> values;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, E fill = E{}) : rows{r}, cols{c}, values(r * c, fill) {}

    E& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    const E& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    std::size_t size() const { return values.size(); }

    bool operator==(const Grid&) const = default;
};

using IdGrid = Grid<std::int32_t>;
using MaskGrid = Grid<std::uint8_t>;

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad{false};
    // Set once any backward rule accumulates into grad.
    bool grad_touched{false};
    // Id of the tape that produced this node; 0 for leaves.
    std::uint64_t tape_id{0};
};

// Shared handle to a dense row-major array. Copies alias the same storage,
// use clone() for a deep copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() const { return node_->data; }
    std::vector<T>& values() const { return node_->data; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) const { node_->requires_grad = flag; }

    // Gradient buffer, allocated as zeros on first access.
    std::span<T> grad() const;
    bool has_grad() const { return node_->grad_touched; }
    void zero_grad() const;

    Tensor clone() const;
    TensorNode<T>* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_{std::move(node)} {}
    std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of backward rules for one forward pass. A tape is consumed
// by exactly one backward() call. A non-recording tape evaluates ops without
// building a graph.
template <typename T>
class Tape {
public:
    explicit Tape(bool recording = true);

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    bool consumed() const { return consumed_; }
    std::uint64_t id() const { return id_; }
    std::size_t size() const { return rules_.size(); }

    // True when an op over these inputs should record a backward rule.
    bool tracks(std::initializer_list<const Tensor<T>*> inputs) const;

    // Allocates an op output attributed to this tape.
    Tensor<T> output(Shape shape, bool requires_grad) const;

    void record(std::function<void()> rule);

    void backward(const Tensor<T>& loss);

private:
    std::vector<std::function<void()>> rules_;
    std::uint64_t id_;
    bool recording_;
    bool consumed_{false};
};

// Throws NumericError naming the op if any value is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const char* op);

// Adds src into the gradient buffer of t and marks it touched.
template <typename T>
void accumulate_grad(const Tensor<T>& t, std::span<const T> src);

}  // namespace quietread
