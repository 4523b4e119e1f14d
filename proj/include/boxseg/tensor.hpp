#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace boxseg {

// Reverse-mode autodiff kernel with a fixed op set. Instantiated for
// float (training) and double (gradient checks); finite differences are
// unreliable at 32-bit, so every numeric check runs on the double build.

template <typename T>
struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until the backward pass touches it
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, T value);
  static Tensor from_values(std::vector<std::size_t> shape, std::vector<T> values);
  static Tensor scalar(T value);

  bool defined() const { return data_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t numel() const { return data_->values.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> values() const { return data_->values; }
  std::span<T> values_mut() { return data_->values; }

  bool has_grad() const { return data_ && !data_->grad.empty(); }
  std::span<const T> grad() const { return data_->grad; }
  std::span<T> grad_mut();  // allocates a zeroed buffer on first use
  void zero_grad();

  bool requires_grad() const { return data_ && data_->requires_grad; }
  Tensor& set_requires_grad(bool value);

  T item() const;  // value of a one-element tensor
  T at(std::size_t r, std::size_t c) const;

  std::shared_ptr<TensorData<T>> data_;
};

// Ordered record of executed operations. Ops append their backward step
// while a tape is active via Tape::Scope; backward() replays the record
// in exact reverse order. One backward pass per tape.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* current();

  void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }
  std::size_t size() const { return steps_.size(); }

  // Seeds d(loss)/d(loss) = 1 and runs the recorded steps in reverse.
  // loss must be a one-element tensor that was recorded on this tape.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::function<void()>> steps_;
};

enum class EwKind { Add, Sub, Mul, Div };

// Binary elementwise ops: shapes must match, or b may be a 1-d tensor
// broadcast along the leading dimension of a 2-d a (bias-style).
template <typename T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& a, T constant);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);  // log(1+e^x), stable
template <typename T> Tensor<T> sine(const Tensor<T>& a);
template <typename T> Tensor<T> cosine(const Tensor<T>& a);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

// Row-max subtraction before exponentiation; rejects non-finite input.
template <typename T> Tensor<T> rowwise_softmax(const Tensor<T>& a);

// Rowwise layer normalization over the last dimension of a 2-d tensor.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

template <typename T> Tensor<T> reduce_sum(const Tensor<T>& a);
template <typename T> Tensor<T> reduce_sum_axis(const Tensor<T>& a, int axis);  // 2-d
template <typename T> Tensor<T> reduce_mean(const Tensor<T>& a);                // rejects empty
template <typename T> Tensor<T> reduce_l1(const Tensor<T>& a);
template <typename T> Tensor<T> reduce_sq_l2(const Tensor<T>& a);

// Row/column selection; backward scatter-adds into the source.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& a, const std::vector<std::size_t>& indices);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t first, std::size_t count);
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

// Mean over rows of logsumexp(row) - logits[row][target]; stable.
// Backward distributes (softmax - onehot) / rows.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& target_class);

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
// f must produce a one-element tensor; step defaults to 1e-5. 64-bit only.
double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double step = 1e-5);

[[noreturn]] void tensor_error(const std::string& message);

extern template struct TensorData<float>;
extern template struct TensorData<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace boxseg
