// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#include "balcony/tensor.hpp"

#include <atomic>
#include <cstring>
#include <sstream>

namespace balcony {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

uint64_t next_tensor_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
thread_local Tape<T>* running_tape = nullptr;

template <typename T>
std::vector<T>& grad_for_write(TensorNode<T>& node) {
  if (!node.requires_grad) {
    throw TapeError("backward attempted to write the gradient of tensor " +
                    std::to_string(node.id) + " which does not require grad");
  }
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  if (running_tape<T> != nullptr) running_tape<T>->notify_write(node);
  return node.grad;
}

}  // namespace detail

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto node = std::make_shared<TensorNode<T>>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  node->id = detail::next_tensor_id();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->id = detail::next_tensor_id();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

template <typename T>
int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return node_->shape[a];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  node_->requires_grad = value;
  if (!value) node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor copy = from(shape(), node_->data, node_->requires_grad);
  return copy;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->data, false);
}

template <typename T>
bool Tensor<T>::bitwise_equal(const Tensor& other) const {
  if (shape() != other.shape()) return false;
  return numel() == 0 ||
         std::memcmp(node_->data.data(), other.node_->data.data(),
                     sizeof(T) * static_cast<size_t>(numel())) == 0;
}

namespace {
template <typename T>
thread_local Tape<T>* active_tape = nullptr;
}  // namespace

template <typename T>
Tape<T>::~Tape() {
  if (active_tape<T> == this) active_tape<T> = nullptr;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>;
}

template <typename T>
void Tape<T>::set_active(Tape* tape) {
  active_tape<T> = tape;
}

template <typename T>
void Tape<T>::record(std::string op, BackwardFn fn) {
  if (consumed_) throw TapeError("recording onto a consumed tape; call reset() first");
  entries_.push_back(Entry{std::move(op), std::move(fn)});
}

template <typename T>
void Tape<T>::notify_write(const TensorNode<T>& node) const {
  if (observer_) observer_(node);
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw TapeError("backward called twice without reset");
  if (entries_.empty()) throw TapeError("backward on an empty tape");
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw TapeError("loss does not depend on any tensor that requires grad");
  }
  consumed_ = true;
  Tape* previous = detail::running_tape<T>;
  detail::running_tape<T> = this;
  struct Restore {
    Tape* prev;
    ~Restore() { detail::running_tape<T> = prev; }
  } restore{previous};

  auto& seed = detail::grad_for_write(loss.node());
  seed[0] += T(1);
  visit_log_.clear();
  visit_log_.reserve(entries_.size());
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    visit_log_.push_back(it->op);
    it->fn();
  }
}

template <typename T>
void Tape<T>::reset() {
  entries_.clear();
  visit_log_.clear();
  consumed_ = false;
}

template <typename T>
std::vector<std::string> Tape<T>::recorded_ops() const {
  std::vector<std::string> ops;
  ops.reserve(entries_.size());
  for (const auto& e : entries_) ops.push_back(e.op);
  return ops;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template std::vector<float>& detail::grad_for_write(TensorNode<float>&);
template std::vector<double>& detail::grad_for_write(TensorNode<double>&);

}  // namespace balcony
