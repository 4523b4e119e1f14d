#include "boxseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace boxseg {

void tensor_error(const std::string& message) { throw std::invalid_argument(message); }

namespace {

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

template <typename T>
void ensure_grad(TensorData<T>& data) {
  if (data.grad.empty()) data.grad.assign(data.values.size(), T(0));
}

// Gradients flow only while a tape is active and some input wants them.
template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
Tensor<T> make_result(std::vector<std::size_t> shape, std::vector<T> values, bool track) {
  Tensor<T> out = Tensor<T>::from_values(std::move(shape), std::move(values));
  out.data_->requires_grad = track;
  return out;
}

template <typename T>
void require_2d(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) tensor_error(std::string(op) + ": expected a 2-d tensor, got " + shape_str(a.shape()));
}

}  // namespace

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<std::size_t> shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<std::size_t> shape, T value) {
  Tensor<T> t;
  t.data_ = std::make_shared<TensorData<T>>();
  t.data_->values.assign(shape_numel(shape), value);
  t.data_->shape = std::move(shape);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_values(std::vector<std::size_t> shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size())
    tensor_error("tensor: shape " + shape_str(shape) + " does not hold " +
                 std::to_string(values.size()) + " values");
  Tensor<T> t;
  t.data_ = std::make_shared<TensorData<T>>();
  t.data_->shape = std::move(shape);
  t.data_->values = std::move(values);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_values({1}, {value});
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  if (rank() != 2) tensor_error("rows(): tensor is not 2-d: " + shape_str(shape()));
  return data_->shape[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  if (rank() != 2) tensor_error("cols(): tensor is not 2-d: " + shape_str(shape()));
  return data_->shape[1];
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  ensure_grad(*data_);
  return data_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (data_) std::fill(data_->grad.begin(), data_->grad.end(), T(0));
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  data_->requires_grad = value;
  return *this;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) tensor_error("item(): tensor has " + std::to_string(numel()) + " elements");
  return data_->values[0];
}

template <typename T>
T Tensor<T>::at(std::size_t r, std::size_t c) const {
  return data_->values[r * cols() + c];
}

// ------------------------------------------------------------------ Tape

template <typename T>
thread_local Tape<T>* tape_current = nullptr;

template <typename T>
Tape<T>* Tape<T>::current() {
  return tape_current<T>;
}

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(tape_current<T>) {
  tape_current<T> = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  tape_current<T> = previous_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) tensor_error("backward: loss must be a one-element tensor");
  if (!loss.requires_grad()) tensor_error("backward: loss does not require grad");
  ensure_grad(*loss.data_);
  loss.data_->grad[0] += T(1);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

// ---------------------------------------------------- binary elementwise

namespace {

enum class Broadcast { None, BiasB, BiasA };

template <typename T>
Broadcast classify_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1]) return Broadcast::BiasB;
  if (b.rank() == 2 && a.rank() == 1 && a.shape()[0] == b.shape()[1]) return Broadcast::BiasA;
  tensor_error(std::string(op) + ": shapes not broadcastable: " + shape_str(a.shape()) + " vs " +
               shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const char* name = kind == EwKind::Add   ? "add"
                     : kind == EwKind::Sub ? "sub"
                     : kind == EwKind::Mul ? "mul"
                                           : "div";
  Broadcast bc = classify_broadcast(a, b, name);
  const Tensor<T>& big = bc == Broadcast::BiasA ? b : a;
  std::size_t n = big.numel();
  std::size_t ncols = bc == Broadcast::None ? n : big.shape()[1];

  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T x = bc == Broadcast::BiasA ? av[i % ncols] : av[i];
    T y = bc == Broadcast::BiasB ? bv[i % ncols] : bv[i];
    switch (kind) {
      case EwKind::Add: out[i] = x + y; break;
      case EwKind::Sub: out[i] = x - y; break;
      case EwKind::Mul: out[i] = x * y; break;
      case EwKind::Div: out[i] = x / y; break;
    }
  }

  bool track = recording<T>({&a, &b});
  Tensor<T> result = make_result(big.shape(), std::move(out), track);
  if (track) {
    Tape<T>::current()->record([kind, bc, ncols, ad = a.data_, bd = b.data_, rd = result.data_] {
      if (rd->grad.empty()) return;
      std::size_t n = rd->values.size();
      for (std::size_t i = 0; i < n; ++i) {
        T g = rd->grad[i];
        std::size_t ia = bc == Broadcast::BiasA ? i % ncols : i;
        std::size_t ib = bc == Broadcast::BiasB ? i % ncols : i;
        T x = ad->values[ia];
        T y = bd->values[ib];
        if (ad->requires_grad) {
          ensure_grad(*ad);
          switch (kind) {
            case EwKind::Add:
            case EwKind::Sub: ad->grad[ia] += g; break;
            case EwKind::Mul: ad->grad[ia] += g * y; break;
            case EwKind::Div: ad->grad[ia] += g / y; break;
          }
        }
        if (bd->requires_grad) {
          ensure_grad(*bd);
          switch (kind) {
            case EwKind::Add: bd->grad[ib] += g; break;
            case EwKind::Sub: bd->grad[ib] -= g; break;
            case EwKind::Mul: bd->grad[ib] += g * x; break;
            case EwKind::Div: bd->grad[ib] -= g * x / (y * y); break;
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(EwKind::Add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(EwKind::Sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(EwKind::Mul, a, b); }
template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(EwKind::Div, a, b); }

// ------------------------------------------------------ unary elementwise

namespace {

// value, then d(value)/d(input) given (input, value)
template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd bwd) {
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);

  bool track = recording<T>({&a});
  Tensor<T> result = make_result(a.shape(), std::move(out), track);
  if (track) {
    Tape<T>::current()->record([bwd, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < rd->values.size(); ++i)
        ad->grad[i] += rd->grad[i] * bwd(ad->values[i], rd->values[i]);
    });
  }
  return result;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T constant) {
  return unary_op(a, [constant](T x) { return x * constant; },
                  [constant](T, T) { return constant; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return stable_sigmoid(x); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
                  [](T x, T) { return stable_sigmoid(x); });
}

template <typename T>
Tensor<T> sine(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Tensor<T> cosine(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::cos(x); }, [](T x, T) { return -std::sin(x); });
}

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows())
    tensor_error("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T(0));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      T x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
    }

  bool track = recording<T>({&a, &b});
  Tensor<T> result = make_result({m, n}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([m, k, n, ad = a.data_, bd = b.data_, rd = result.data_] {
      if (rd->grad.empty()) return;
      if (ad->requires_grad) {
        ensure_grad(*ad);  // dA += g . B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += rd->grad[i * n + j] * bd->values[p * n + j];
            ad->grad[i * k + p] += acc;
          }
      }
      if (bd->requires_grad) {
        ensure_grad(*bd);  // dB += A^T . g
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t i = 0; i < m; ++i) {
            T x = ad->values[i * k + p];
            for (std::size_t j = 0; j < n; ++j) bd->grad[p * n + j] += x * rd->grad[i * n + j];
          }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_2d(a, "transpose");
  std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];

  bool track = recording<T>({&a});
  Tensor<T> result = make_result({n, m}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([m, n, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ad->grad[i * n + j] += rd->grad[j * m + i];
    });
  }
  return result;
}

// --------------------------------------------------------------- softmax

template <typename T>
Tensor<T> rowwise_softmax(const Tensor<T>& a) {
  require_2d(a, "rowwise_softmax");
  auto av = a.values();
  for (T v : av)
    if (!std::isfinite(v)) tensor_error("rowwise_softmax: non-finite input");

  std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T mx = av[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av[i * n + j]);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(av[i * n + j] - mx);
      total += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }

  bool track = recording<T>({&a});
  Tensor<T> result = make_result({m, n}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([m, n, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < m; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += rd->grad[i * n + j] * rd->values[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          T s = rd->values[i * n + j];
          ad->grad[i * n + j] += s * (rd->grad[i * n + j] - dot);
        }
      }
    });
  }
  return result;
}

// ------------------------------------------------------------- layer norm

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_2d(x, "layer_norm");
  std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n)
    tensor_error("layer_norm: gain/bias must have " + std::to_string(n) + " elements");

  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<T> out(m * n);
  std::vector<T> inv_std(m);
  std::vector<T> normalized(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += xv[i * n + j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      T d = xv[i * n + j] - mean;
      var += d * d;
    }
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normalized[i * n + j] = (xv[i * n + j] - mean) * inv_std[i];
      out[i * n + j] = normalized[i * n + j] * gv[j] + bv[j];
    }
  }

  bool track = recording<T>({&x, &gain, &bias});
  Tensor<T> result = make_result({m, n}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([m, n, inv_std = std::move(inv_std),
                                normalized = std::move(normalized), xd = x.data_, gd = gain.data_,
                                bd = bias.data_, rd = result.data_] {
      if (rd->grad.empty()) return;
      for (std::size_t i = 0; i < m; ++i) {
        if (gd->requires_grad) {
          ensure_grad(*gd);
          for (std::size_t j = 0; j < n; ++j)
            gd->grad[j] += rd->grad[i * n + j] * normalized[i * n + j];
        }
        if (bd->requires_grad) {
          ensure_grad(*bd);
          for (std::size_t j = 0; j < n; ++j) bd->grad[j] += rd->grad[i * n + j];
        }
        if (xd->requires_grad) {
          ensure_grad(*xd);
          // dxhat = g . gain; dx = s * (dxhat - mean(dxhat) - xhat * mean(dxhat . xhat))
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            T dxh = rd->grad[i * n + j] * gd->values[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * normalized[i * n + j];
          }
          mean_dxhat /= T(n);
          mean_dxhat_xhat /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            T dxh = rd->grad[i * n + j] * gd->values[j];
            xd->grad[i * n + j] +=
                inv_std[i] * (dxh - mean_dxhat - normalized[i * n + j] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return result;
}

// -------------------------------------------------------------- reductions

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += v;
  bool track = recording<T>({&a});
  Tensor<T> result = make_result<T>({1}, std::vector<T>{total}, track);
  if (track) {
    Tape<T>::current()->record([ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < ad->values.size(); ++i) ad->grad[i] += rd->grad[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_sum_axis(const Tensor<T>& a, int axis) {
  require_2d(a, "reduce_sum_axis");
  if (axis != 0 && axis != 1)
    tensor_error("reduce_sum_axis: invalid axis " + std::to_string(axis) + " for " +
                 shape_str(a.shape()));
  std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  std::vector<T> out(axis == 0 ? n : m, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += av[i * n + j];

  bool track = recording<T>({&a});
  std::size_t out_len = out.size();
  Tensor<T> result = make_result({out_len}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([m, n, axis, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ad->grad[i * n + j] += rd->grad[axis == 0 ? j : i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  if (a.numel() == 0) tensor_error("reduce_mean: empty reduction");
  T total = T(0);
  for (T v : a.values()) total += v;
  T inv = T(1) / T(a.numel());
  bool track = recording<T>({&a});
  Tensor<T> result = make_result<T>({1}, std::vector<T>{total * inv}, track);
  if (track) {
    Tape<T>::current()->record([inv, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < ad->values.size(); ++i) ad->grad[i] += rd->grad[0] * inv;
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_l1(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += std::abs(v);
  bool track = recording<T>({&a});
  Tensor<T> result = make_result<T>({1}, std::vector<T>{total}, track);
  if (track) {
    Tape<T>::current()->record([ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < ad->values.size(); ++i) {
        T v = ad->values[i];
        T s = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
        ad->grad[i] += rd->grad[0] * s;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_sq_l2(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += v * v;
  bool track = recording<T>({&a});
  Tensor<T> result = make_result<T>({1}, std::vector<T>{total}, track);
  if (track) {
    Tape<T>::current()->record([ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < ad->values.size(); ++i)
        ad->grad[i] += rd->grad[0] * T(2) * ad->values[i];
    });
  }
  return result;
}

// ---------------------------------------------------------- row/col select

template <typename T>
Tensor<T> take_rows(const Tensor<T>& a, const std::vector<std::size_t>& indices) {
  require_2d(a, "take_rows");
  std::size_t n = a.cols();
  auto av = a.values();
  std::vector<T> out(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= a.rows())
      tensor_error("take_rows: index " + std::to_string(indices[r]) + " out of range for " +
                   shape_str(a.shape()));
    std::copy_n(av.begin() + indices[r] * n, n, out.begin() + r * n);
  }

  bool track = recording<T>({&a});
  Tensor<T> result = make_result({indices.size(), n}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([n, indices, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < n; ++j)
          ad->grad[indices[r] * n + j] += rd->grad[r * n + j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t first, std::size_t count) {
  require_2d(a, "slice_cols");
  std::size_t m = a.rows(), n = a.cols();
  if (first + count > n)
    tensor_error("slice_cols: window [" + std::to_string(first) + ", " +
                 std::to_string(first + count) + ") exceeds " + shape_str(a.shape()));
  auto av = a.values();
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(av.begin() + i * n + first, count, out.begin() + i * count);

  bool track = recording<T>({&a});
  Tensor<T> result = make_result({m, count}, std::move(out), track);
  if (track) {
    Tape<T>::current()->record([m, n, first, count, ad = a.data_, rd = result.data_] {
      if (rd->grad.empty() || !ad->requires_grad) return;
      ensure_grad(*ad);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j)
          ad->grad[i * n + first + j] += rd->grad[i * count + j];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) tensor_error("concat_cols: no parts");
  std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != m) tensor_error("concat_cols: row counts differ");
    total += p.cols();
  }
  std::vector<T> out(m * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    auto pv = p.values();
    std::size_t c = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.begin() + i * c, c, out.begin() + i * total + offset);
    offset += c;
  }

  bool track = Tape<T>::current() != nullptr &&
               std::any_of(parts.begin(), parts.end(),
                           [](const Tensor<T>& p) { return p.requires_grad(); });
  Tensor<T> result = make_result({m, total}, std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<TensorData<T>>> datas;
    for (const auto& p : parts) datas.push_back(p.data_);
    Tape<T>::current()->record([m, total, datas = std::move(datas), rd = result.data_] {
      if (rd->grad.empty()) return;
      std::size_t offset = 0;
      for (auto& pd : datas) {
        std::size_t c = pd->shape[1];
        if (pd->requires_grad) {
          ensure_grad(*pd);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j)
              pd->grad[i * c + j] += rd->grad[i * total + offset + j];
        }
        offset += c;
      }
    });
  }
  return result;
}

// ---------------------------------------------------------- cross entropy

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& target_class) {
  require_2d(logits, "softmax_cross_entropy");
  std::size_t m = logits.rows(), n = logits.cols();
  if (target_class.size() != m)
    tensor_error("softmax_cross_entropy: " + std::to_string(target_class.size()) +
                 " targets for " + std::to_string(m) + " rows");
  auto lv = logits.values();
  std::vector<T> probs(m * n);
  T total = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    int t = target_class[i];
    if (t < 0 || static_cast<std::size_t>(t) >= n)
      tensor_error("softmax_cross_entropy: target " + std::to_string(t) + " out of range");
    T mx = lv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(lv[i * n + j] - mx);
      sum += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= sum;
    total += std::log(sum) + mx - lv[i * n + static_cast<std::size_t>(t)];
  }
  total /= T(m);

  bool track = recording<T>({&logits});
  Tensor<T> result = make_result<T>({1}, std::vector<T>{total}, track);
  if (track) {
    Tape<T>::current()->record([m, n, target_class, probs = std::move(probs), ld = logits.data_,
                                rd = result.data_] {
      if (rd->grad.empty() || !ld->requires_grad) return;
      ensure_grad(*ld);
      T g = rd->grad[0] / T(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          T onehot = (static_cast<std::size_t>(target_class[i]) == j) ? T(1) : T(0);
          ld->grad[i * n + j] += g * (probs[i * n + j] - onehot);
        }
    });
  }
  return result;
}

// ------------------------------------------------------------- grad check

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                  Tensor<double> x, double step) {
  if (step <= 0) tensor_error("grad_check: step must be positive");
  x.set_requires_grad(true);
  x.zero_grad();

  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    Tensor<double> y = f(x);
    if (y.numel() != 1) tensor_error("grad_check: f must produce a one-element tensor");
    tape.backward(y);
  }
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  x.set_requires_grad(false);
  double worst = 0.0;
  auto xv = x.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    double saved = xv[i];
    xv[i] = saved + step;
    double up = f(x).item();
    xv[i] = saved - step;
    double down = f(x).item();
    xv[i] = saved;
    double central = (up - down) / (2.0 * step);
    double err = std::abs(analytic[i] - central) / std::max(1.0, std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

// --------------------------------------------------------- instantiations

template struct TensorData<float>;
template struct TensorData<double>;
template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define BOXSEG_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> elementwise(EwKind, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> divide(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> softplus(const Tensor<T>&);                                               \
  template Tensor<T> sine(const Tensor<T>&);                                                   \
  template Tensor<T> cosine(const Tensor<T>&);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> rowwise_softmax(const Tensor<T>&);                                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> reduce_sum(const Tensor<T>&);                                             \
  template Tensor<T> reduce_sum_axis(const Tensor<T>&, int);                                   \
  template Tensor<T> reduce_mean(const Tensor<T>&);                                            \
  template Tensor<T> reduce_l1(const Tensor<T>&);                                              \
  template Tensor<T> reduce_sq_l2(const Tensor<T>&);                                           \
  template Tensor<T> take_rows(const Tensor<T>&, const std::vector<std::size_t>&);             \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, const std::vector<int>&);

BOXSEG_INSTANTIATE_OPS(float)
BOXSEG_INSTANTIATE_OPS(double)

#undef BOXSEG_INSTANTIATE_OPS

}  // namespace boxseg
