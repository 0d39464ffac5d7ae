#include "cyformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cyformer/errors.hpp"

namespace cyformer {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  auto s = std::make_shared<TensorStorage<T>>();
  s->data.assign(shape_numel(shape), value);
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  auto s = std::make_shared<TensorStorage<T>>();
  s->shape = std::move(shape);
  s->data = std::move(data);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from({1}, {value});
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1)
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return storage_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() const {
  storage_->grad.assign(storage_->data.size(), T(0));
}

template <typename T>
std::span<T> Tensor<T>::ensure_grad() const {
  if (storage_->grad.size() != storage_->data.size())
    storage_->grad.assign(storage_->data.size(), T(0));
  return storage_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return from(shape(), storage_->data, false);
}

// ---- tape ------------------------------------------------------------------

template <typename T>
void Tape<T>::record(std::string op_name, BackwardRule rule) {
  ops_.push_back({std::move(op_name), std::move(rule)});
}

template <typename T>
std::size_t Tape<T>::backward(Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  auto g = loss.ensure_grad();
  g[0] = T(1);
  std::size_t visited = 0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->rule();
    ++visited;
  }
  return visited;
}

namespace {
template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

thread_local KinkMonitor* g_kink_monitor = nullptr;
} // namespace

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

void KinkMonitor::observe(double value) {
  const std::size_t bit = value > 0.0 ? 1 : 0;
  hash_ = (hash_ ^ (bit + 2 * (count_ & 0xff))) * 0x100000001b3ULL;
  ++count_;
  closest_ = std::min(closest_, std::abs(value));
}

KinkMonitor* KinkMonitor::active() { return g_kink_monitor; }
void KinkMonitor::set_active(KinkMonitor* monitor) { g_kink_monitor = monitor; }

namespace detail {
template <typename T>
bool needs_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}
} // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template bool detail::needs_record<float>(std::initializer_list<const Tensor<float>*>);
template bool detail::needs_record<double>(std::initializer_list<const Tensor<double>*>);

} // namespace cyformer
