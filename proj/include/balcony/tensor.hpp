// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the reverse-mode gradient tape.
//
// A Tensor is a cheap handle to a shared node (data, optional grad). Ops in
// ops.hpp record a backward closure on the thread's active Tape whenever one
// of their inputs requires grad; with no active tape, nothing is recorded and
// results never require grad.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "balcony/errors.hpp"

namespace balcony {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Empty means "no gradient". Allocated lazily on first accumulation.
  std::vector<T> grad;
  bool requires_grad = false;
  uint64_t id = 0;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // Negative axes count from the end.
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(int64_t flat_index) const { return node_->data.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  uint64_t id() const { return node_->id; }

  // Deep copy of values; the copy owns fresh storage and no grad.
  Tensor clone() const;
  // Same values, never participates in gradient recording.
  Tensor detach() const;

  bool bitwise_equal(const Tensor& other) const;

  TensorNode<T>& node() const { return *node_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode<T>> node_;
};

// An ordered record of differentiable operations. backward() replays the
// recorded closures in exact reverse order, then the tape is consumed until
// reset().
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;
  using WriteObserver = std::function<void(const TensorNode<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  void record(std::string op, BackwardFn fn);
  void backward(const Tensor<T>& loss);
  void reset();

  size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  // Op names in the order backward visited them.
  const std::vector<std::string>& visit_log() const { return visit_log_; }
  std::vector<std::string> recorded_ops() const;

  // Called for every gradient buffer written during backward.
  void set_write_observer(WriteObserver observer) {
    observer_ = std::move(observer);
  }
  void notify_write(const TensorNode<T>& node) const;

  static Tape* active();
  static void set_active(Tape* tape);

 private:
  struct Entry {
    std::string op;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::vector<std::string> visit_log_;
  WriteObserver observer_;
  bool consumed_ = false;
};

// Makes a tape the thread's active tape for the lifetime of the scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) {
    Tape<T>::set_active(&tape);
  }
  ~TapeScope() { Tape<T>::set_active(previous_); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording (teacher passes, evaluation) for the scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::set_active(nullptr); }
  ~NoGradScope() { Tape<T>::set_active(previous_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

// Returns the gradient buffer of `node`, allocating zeros on first use.
// Throws TapeError if the node does not require grad: frozen tensors must
// never be written during backward.
template <typename T>
std::vector<T>& grad_for_write(TensorNode<T>& node);

uint64_t next_tensor_id();

}  // namespace detail

}  // namespace balcony
