#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sama {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tape;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until an adjoint reaches this node
  bool requires_grad = false;
  Tape<T>* tape = nullptr;
  std::size_t record = 0;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major N-d array. Copies share storage; every op materializes a
/// fresh result, so a Tensor is immutable apart from its grad buffer and the
/// leaf-parameter updates an optimizer performs through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no tape attachment.
  Tensor detach() const;

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of executed ops. Constructing a Tape makes it the active tape
/// of the calling thread until destruction; ops executed while it is active and
/// touching a requires_grad input append a record holding the adjoint rule.
template <typename T>
class Tape {
 public:
  using Node = TensorNode<T>;
  using Adjoint = std::function<void(Node& out)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds the scalar root with 1 and walks records in reverse execution order.
  /// A tape supports exactly one backward pass; a second call throws.
  void backward(const Tensor<T>& root);
  void backward(const Tensor<T>& root, std::span<const T> seed);

  /// Drops all records so the tape can be reused for another forward pass.
  void reset();

  void push(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> inputs,
            const char* op, Adjoint adjoint);

 private:
  struct Record {
    std::shared_ptr<Node> output;
    std::vector<std::shared_ptr<Node>> inputs;
    const char* op;
    Adjoint adjoint;
  };
  std::vector<Record> records_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

/// Suspends recording on this thread for its lifetime.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* saved_;
};

template <typename T>
void backward(const Tensor<T>& root);

namespace detail {

/// Builds a result node and records `adjoint` when any input participates in
/// the active tape. Adjoint closures read their output grad from `out`.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      typename Tape<T>::Adjoint adjoint);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      const char* op, typename Tape<T>::Adjoint adjoint);

}  // namespace detail

}  // namespace sama
