#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage (data, shape, optional grad).
// Ops read a thread-local active Tape; when one is active and any operand
// requires a gradient, the op appends its backward rule to the tape and the
// result is marked as requiring a gradient. Without an active tape ops are
// plain forward computations, which is what inference uses.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cyformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad; // empty until a backward pass or zero_grad touches it
  bool requires_grad = false;
};

template <typename T>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
  std::size_t size() const { return storage_->data.size(); }

  std::span<T> data() { return storage_->data; }
  std::span<const T> data() const { return storage_->data; }
  T item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<T> grad() { return storage_->grad; }
  std::span<const T> grad() const { return storage_->grad; }
  // Both act on the shared storage, so they are usable through const handles
  // captured by backward rules.
  // Allocates the gradient buffer if needed, then fills it with zeros.
  void zero_grad() const;
  // Allocates a zero gradient buffer if none exists.
  std::span<T> ensure_grad() const;

  // Deep copy of shape and data; the copy is detached from any tape.
  Tensor clone() const;

  const TensorStorage<T>* id() const { return storage_.get(); }
  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }

private:
  explicit Tensor(std::shared_ptr<TensorStorage<T>> s) : storage_(std::move(s)) {}
  std::shared_ptr<TensorStorage<T>> storage_;
};

template <typename T>
struct Parameter {
  std::string name; // dotted path, e.g. "encoder.0.row_attn.w_q"
  Tensor<T> tensor;
};

template <typename T>
class Tape {
public:
  using BackwardRule = std::function<void()>;

  void record(std::string op_name, BackwardRule rule);

  // Seeds d(loss)/d(loss) = 1 and replays the recorded rules newest first.
  // Returns the number of rules replayed. Throws ContractError unless the
  // loss is a single element.
  std::size_t backward(Tensor<T>& loss);

  void clear() { ops_.clear(); }
  std::size_t size() const { return ops_.size(); }
  const std::string& op_name(std::size_t i) const { return ops_.at(i).name; }

private:
  struct Op {
    std::string name;
    BackwardRule rule;
  };
  std::vector<Op> ops_;
};

template <typename T>
Tape<T>* active_tape();

// Makes `tape` the active tape of the calling thread for the scope's lifetime.
template <typename T>
class TapeScope {
public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

private:
  Tape<T>* previous_;
};

// Records the sign pattern of every non-smooth point an op passes through
// (ReLU inputs, |pred - target| in the MAE loss). The gradient checker uses
// it to drop coordinates whose perturbation crosses a kink.
class KinkMonitor {
public:
  void observe(double value);
  std::size_t fingerprint() const { return hash_; }
  double closest() const { return closest_; }

  static KinkMonitor* active();
  static void set_active(KinkMonitor* monitor);

private:
  std::size_t hash_ = 0xcbf29ce484222325ULL;
  std::size_t count_ = 0;
  double closest_ = 1e300;
};

enum class Activation { relu, gelu };

// ---- ops -------------------------------------------------------------------

// a[m x k] * b[k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Batched product over the leading axis: a[g x m x k] * b[g x k x n], or with
// transpose_b, a[g x m x k] * b[g x n x k]^T.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

// y = x * w + b over all leading axes of x; w is [in x out], b is [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act);

// x + y where y's shape equals a trailing suffix of x's shape.
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);

// Repeats x along a new leading axis of length n.
template <typename T>
Tensor<T> expand(const Tensor<T>& x, std::size_t n);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

// Copies; the element count must be preserved.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// out.shape[i] = x.shape[axes[i]]; copies.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

namespace detail {
// True when an op over `inputs` must be recorded on the active tape.
template <typename T>
bool needs_record(std::initializer_list<const Tensor<T>*> inputs);
} // namespace detail

} // namespace cyformer
