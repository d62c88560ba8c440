#include "quietread/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace quietread {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode<T>>();
    node->data.assign(shape_numel(shape), T{0});
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor{std::move(node)};
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("tensor shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor{std::move(node)};
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::grad() const {
    if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), T{0});
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
    node_->grad.assign(node_->data.size(), T{0});
    node_->grad_touched = false;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return from(node_->shape, node_->data, node_->requires_grad);
}

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <typename T>
Tape<T>::Tape(bool recording) : id_{next_tape_id.fetch_add(1)}, recording_{recording} {}

template <typename T>
bool Tape<T>::tracks(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
        if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
}

template <typename T>
Tensor<T> Tape<T>::output(Shape shape, bool requires_grad) const {
    auto out = Tensor<T>::zeros(std::move(shape), requires_grad);
    out.node()->tape_id = id_;
    if (requires_grad) out.grad();
    return out;
}

template <typename T>
void Tape<T>::record(std::function<void()> rule) {
    if (consumed_) throw ContractError("cannot record onto a consumed tape");
    if (recording_) rules_.push_back(std::move(rule));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (consumed_) throw ContractError("tape already consumed by a previous backward pass");
    if (!recording_) throw ContractError("backward on a non-recording tape");
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string{"<undefined>"}));
    }
    if (loss.node()->tape_id != id_ || !loss.requires_grad()) {
        throw ContractError("loss was not produced on this tape");
    }
    consumed_ = true;
    loss.grad()[0] += T{1};
    loss.node()->grad_touched = true;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    rules_.clear();
    rules_.shrink_to_fit();
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t.data()[i])) {
            throw NumericError(std::string{"non-finite value produced by "} + op + " at flat index " +
                               std::to_string(i));
        }
    }
}

template <typename T>
void accumulate_grad(const Tensor<T>& t, std::span<const T> src) {
    auto g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    t.node()->grad_touched = true;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template void check_finite(const Tensor<float>&, const char*);
template void check_finite(const Tensor<double>&, const char*);
template void accumulate_grad(const Tensor<float>&, std::span<const float>);
template void accumulate_grad(const Tensor<double>&, std::span<const double>);

}  // namespace quietread
