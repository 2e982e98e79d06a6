#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tdcedn {

using i64 = std::int64_t;

enum class Precision : std::uint8_t { f32 = 0, f64 = 1 };

template <typename S>
struct precision_of;
template <>
struct precision_of<float> {
  static constexpr Precision value = Precision::f32;
};
template <>
struct precision_of<double> {
  static constexpr Precision value = Precision::f64;
};

// Dense NCHW shape.  Every dimension is at least 1; rank-deficient data
// (biases, per-channel scales) lives in leading dimensions with trailing 1s.
struct Shape {
  i64 n = 1, c = 1, h = 1, w = 1;

  i64 count() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

inline void check_shape(const Shape& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
    throw std::invalid_argument("tensor shape " + s.str() + " has a dimension < 1");
}

// Dense tensor with an optional gradient buffer of identical shape.
// Data length always equals n*c*h*w; flat index ((n*C + c)*H + y)*W + x.
template <typename S>
class Tensor {
 public:
  Tensor() : Tensor(Shape{1, 1, 1, 1}) {}

  explicit Tensor(Shape s, S fill = S(0)) : shape_(s) {
    check_shape(s);
    data_.assign(static_cast<std::size_t>(s.count()), fill);
  }

  static Tensor zeros(Shape s) { return Tensor(s, S(0)); }
  static Tensor ones(Shape s) { return Tensor(s, S(1)); }

  static Tensor from_values(Shape s, std::vector<S> values) {
    check_shape(s);
    if (static_cast<i64>(values.size()) != s.count())
      throw std::invalid_argument("from_values: " + std::to_string(values.size()) +
                                  " values for shape " + s.str());
    Tensor t;
    t.shape_ = s;
    t.data_ = std::move(values);
    return t;
  }

  const Shape& shape() const { return shape_; }
  i64 size() const { return static_cast<i64>(data_.size()); }

  S* ptr() { return data_.data(); }
  const S* ptr() const { return data_.data(); }
  std::vector<S>& data() { return data_; }
  const std::vector<S>& data() const { return data_; }

  S& at(i64 n, i64 c, i64 y, i64 x) { return data_[flat(n, c, y, x)]; }
  S at(i64 n, i64 c, i64 y, i64 x) const { return data_[flat(n, c, y, x)]; }
  S& operator()(i64 n, i64 c, i64 y, i64 x) { return data_[flat(n, c, y, x)]; }
  S operator()(i64 n, i64 c, i64 y, i64 x) const { return data_[flat(n, c, y, x)]; }

  bool has_grad() const { return !grad_.empty(); }

  std::vector<S>& grad() {
    if (grad_.empty()) throw std::logic_error("gradient buffer not allocated");
    return grad_;
  }
  const std::vector<S>& grad() const {
    if (grad_.empty()) throw std::logic_error("gradient buffer not allocated");
    return grad_;
  }

  void ensure_grad() {
    if (grad_.empty()) grad_.assign(data_.size(), S(0));
  }
  void zero_grad() {
    if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), S(0));
  }
  void drop_grad() { grad_.clear(); }

  // Accumulates g into the gradient buffer, allocating it on first use.
  void add_grad(const Tensor<S>& g) {
    if (!(g.shape_ == shape_))
      throw std::invalid_argument("add_grad: shape " + g.shape_.str() +
                                  " vs tensor " + shape_.str());
    ensure_grad();
    const S* src = g.ptr();
    for (std::size_t i = 0; i < grad_.size(); ++i) grad_[i] += src[i];
  }

 private:
  std::size_t flat(i64 n, i64 c, i64 y, i64 x) const {
    return static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + y) * shape_.w + x);
  }

  Shape shape_;
  std::vector<S> data_;
  std::vector<S> grad_;
};

namespace detail {
template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument(std::string(op) + ": shapes " + a.shape().str() +
                                " and " + b.shape().str() + " differ");
}
}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<S> out(a.shape());
  for (i64 i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<S> out(a.shape());
  for (i64 i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<S> out(a.shape());
  for (i64 i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S k) {
  Tensor<S> out(a.shape());
  for (i64 i = 0; i < a.size(); ++i) out.ptr()[i] = a.ptr()[i] * k;
  return out;
}

template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Tensor<S> out(a.shape());
  for (i64 i = 0; i < a.size(); ++i) out.ptr()[i] = std::clamp(a.ptr()[i], lo, hi);
  return out;
}

// Concatenation along the channel axis; the inverse split is the backward op.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw std::invalid_argument("concat_channels: non-channel dims differ, " +
                                sa.str() + " vs " + sb.str());
  Tensor<S> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const i64 plane = sa.h * sa.w;
  for (i64 n = 0; n < sa.n; ++n) {
    S* dst = out.ptr() + n * (sa.c + sb.c) * plane;
    std::copy_n(a.ptr() + n * sa.c * plane, sa.c * plane, dst);
    std::copy_n(b.ptr() + n * sb.c * plane, sb.c * plane, dst + sa.c * plane);
  }
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& t, i64 c_first) {
  const Shape& s = t.shape();
  if (c_first < 1 || c_first >= s.c)
    throw std::invalid_argument("split_channels: split point " + std::to_string(c_first) +
                                " outside " + s.str());
  Tensor<S> a(Shape{s.n, c_first, s.h, s.w});
  Tensor<S> b(Shape{s.n, s.c - c_first, s.h, s.w});
  const i64 plane = s.h * s.w;
  for (i64 n = 0; n < s.n; ++n) {
    const S* src = t.ptr() + n * s.c * plane;
    std::copy_n(src, c_first * plane, a.ptr() + n * c_first * plane);
    std::copy_n(src + c_first * plane, (s.c - c_first) * plane,
                b.ptr() + n * (s.c - c_first) * plane);
  }
  return {std::move(a), std::move(b)};
}

template <typename S>
Tensor<S> slice_channels(const Tensor<S>& t, i64 c0, i64 c1) {
  const Shape& s = t.shape();
  if (c0 < 0 || c1 <= c0 || c1 > s.c)
    throw std::invalid_argument("slice_channels: [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") outside " + s.str());
  Tensor<S> out(Shape{s.n, c1 - c0, s.h, s.w});
  const i64 plane = s.h * s.w;
  for (i64 n = 0; n < s.n; ++n)
    std::copy_n(t.ptr() + (n * s.c + c0) * plane, (c1 - c0) * plane,
                out.ptr() + n * (c1 - c0) * plane);
  return out;
}

}  // namespace tdcedn
