#include "sama/tensor.hpp"

#include <sstream>

namespace sama {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto node = std::make_shared<TensorNode<T>>();
  node->data.assign(sama::numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  if (sama::numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " holds " +
                     std::to_string(sama::numel(shape)) + " elements, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from({}, {value});
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->data);
}

template <typename T>
Tape<T>::Tape() : previous_(active_tape<T>()) {
  active_tape<T>() = this;
}

template <typename T>
Tape<T>::~Tape() {
  reset();
  active_tape<T>() = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>();
}

template <typename T>
void Tape<T>::push(std::shared_ptr<Node> out, std::vector<std::shared_ptr<Node>> inputs,
                   const char* op, Adjoint adjoint) {
  out->tape = this;
  out->record = records_.size();
  records_.push_back({std::move(out), std::move(inputs), op, std::move(adjoint)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw AutogradError("backward: root must be scalar, got shape " + shape_str(root.shape()) +
                        "; pass a seed adjoint instead");
  }
  const T one(1);
  backward(root, std::span<const T>(&one, 1));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root, std::span<const T> seed) {
  Node* r = root.node();
  if (r == nullptr || r->tape != this) {
    throw AutogradError("backward: tensor is not attached to this tape");
  }
  if (consumed_) {
    throw AutogradError("backward: tape already consumed (double backward is unsupported)");
  }
  if (seed.size() != r->data.size()) {
    throw ShapeError("backward: seed has " + std::to_string(seed.size()) +
                     " elements, root has shape " + shape_str(r->shape));
  }
  consumed_ = true;
  T* g = r->grad_buffer();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (std::size_t i = r->record + 1; i-- > 0;) {
    Record& rec = records_[i];
    if (rec.output->grad.empty()) continue;
    rec.adjoint(*rec.output);
  }
}

template <typename T>
void Tape<T>::reset() {
  for (auto& rec : records_) rec.output->tape = nullptr;
  records_.clear();
  consumed_ = false;
}

template <typename T>
NoGradGuard<T>::NoGradGuard() : saved_(active_tape<T>()) {
  active_tape<T>() = nullptr;
}

template <typename T>
NoGradGuard<T>::~NoGradGuard() {
  active_tape<T>() = saved_;
}

template <typename T>
void backward(const Tensor<T>& root) {
  if (!root.defined() || root.node()->tape == nullptr) {
    throw AutogradError("backward: tensor is detached from any tape");
  }
  root.node()->tape->backward(root);
}

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      typename Tape<T>::Adjoint adjoint) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape<T>* tape = Tape<T>::active();
  bool track = false;
  if (tape != nullptr) {
    for (const Tensor<T>* in : inputs) track = track || (in && in->requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    std::vector<std::shared_ptr<TensorNode<T>>> keep;
    keep.reserve(inputs.size());
    for (const Tensor<T>* in : inputs) {
      if (in) keep.push_back(in->shared_node());
    }
    tape->push(node, std::move(keep), op, std::move(adjoint));
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                      const char* op, typename Tape<T>::Adjoint adjoint) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  Tape<T>* tape = Tape<T>::active();
  bool track = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    std::vector<std::shared_ptr<TensorNode<T>>> keep;
    keep.reserve(inputs.size());
    for (const auto& in : inputs) keep.push_back(in.shared_node());
    tape->push(node, std::move(keep), op, std::move(adjoint));
  }
  return Tensor<T>(std::move(node));
}

template Tensor<float> make_result(Shape, std::vector<float>,
                                   std::initializer_list<const Tensor<float>*>, const char*,
                                   Tape<float>::Adjoint);
template Tensor<double> make_result(Shape, std::vector<double>,
                                    std::initializer_list<const Tensor<double>*>, const char*,
                                    Tape<double>::Adjoint);
template Tensor<float> make_result(Shape, std::vector<float>, const std::vector<Tensor<float>>&,
                                   const char*, Tape<float>::Adjoint);
template Tensor<double> make_result(Shape, std::vector<double>,
                                    const std::vector<Tensor<double>>&, const char*,
                                    Tape<double>::Adjoint);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class NoGradGuard<float>;
template class NoGradGuard<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace sama
