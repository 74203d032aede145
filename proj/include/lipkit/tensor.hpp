#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lipkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Thrown when an operation's shape contract is violated.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when non-finite values appear where they are forbidden.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense row-major N-dimensional array. The single numeric carrier of the
/// toolkit; Eigen maps provide the 2-D views all heavy math runs through.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape_));
  }

  static Tensor from(Shape shape, std::vector<Scalar> data) {
    Tensor t(std::move(shape));
    if (data.size() != t.numel())
      throw ShapeError("Tensor::from: " + std::to_string(data.size()) + " values for shape " +
                       shape_str(t.shape_));
    t.data_ = std::move(data);
    t.require_finite("Tensor::from");
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& raw() { return data_; }
  const std::vector<Scalar>& raw() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return data_[flat_index({static_cast<std::size_t>(ix)...})];
  }
  template <typename... Ix>
  Scalar operator()(Ix... ix) const {
    return data_[flat_index({static_cast<std::size_t>(ix)...})];
  }

  /// View as an Eigen row-major matrix; rows*cols must cover the buffer.
  Eigen::Map<MatrixX<Scalar>> matrix(Eigen::Index rows, Eigen::Index cols) {
    check_view(rows * cols);
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const MatrixX<Scalar>> matrix(Eigen::Index rows, Eigen::Index cols) const {
    check_view(rows * cols);
    return {data_.data(), rows, cols};
  }
  Eigen::Map<VectorX<Scalar>> vec() {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }
  Eigen::Map<const VectorX<Scalar>> vec() const {
    return {data_.data(), static_cast<Eigen::Index>(data_.size())};
  }

  /// Reinterpret with a new shape of identical element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }
  void setZero() { fill(Scalar(0)); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = static_cast<Other>(data_[i]);
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }
  void require_finite(const char* where) const {
    if (!all_finite()) throw NumericError(std::string(where) + ": non-finite value in tensor");
  }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> ix) const {
    std::size_t flat = 0, k = 0;
    for (std::size_t i : ix) flat = flat * shape_[k++] + i;
    return flat;
  }
  void check_view(Eigen::Index n) const {
    if (static_cast<std::size_t>(n) != data_.size())
      throw ShapeError("matrix view of " + std::to_string(n) + " elements over " +
                       shape_str(shape_));
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

/// c[i][j] = sum_l a[i][l] * b[l][j]
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  Tensor<S> c({a.dim(0), b.dim(1)});
  c.matrix(a.dim(0), b.dim(1)).noalias() =
      a.matrix(a.dim(0), a.dim(1)) * b.matrix(b.dim(0), b.dim(1));
  return c;
}

enum class Reduce { kSum, kMean, kMax };

/// Reduce over a set of axes; reduced extents are removed from the shape.
/// Reducing every axis yields a rank-1 tensor of one element.
template <typename S>
Tensor<S> reduce(const Tensor<S>& x, const std::vector<std::size_t>& axes, Reduce kind) {
  std::vector<bool> drop(x.rank(), false);
  for (std::size_t a : axes) {
    if (a >= x.rank())
      throw ShapeError("reduce: axis " + std::to_string(a) + " out of range for " +
                       shape_str(x.shape()));
    drop[a] = true;
  }
  Shape out_shape;
  std::size_t reduced_count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (drop[i])
      reduced_count *= x.dim(i);
    else
      out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<S> out(out_shape,
                kind == Reduce::kMax ? std::numeric_limits<S>::lowest() : S(0));

  // Walk the input once, computing the output flat index of each element.
  std::vector<std::size_t> idx(x.rank(), 0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) {
    std::size_t oflat = 0;
    for (std::size_t i = 0; i < x.rank(); ++i)
      if (!drop[i]) oflat = oflat * x.dim(i) + idx[i];
    if (kind == Reduce::kMax)
      out[oflat] = std::max(out[oflat], x[flat]);
    else
      out[oflat] += x[flat];
    for (std::size_t i = x.rank(); i-- > 0;) {
      if (++idx[i] < x.dim(i)) break;
      idx[i] = 0;
    }
  }
  if (kind == Reduce::kMean)
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= static_cast<S>(reduced_count);
  return out;
}

// --- LKT1 tensor file format ---------------------------------------------
// magic "LKT1", u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u32 LE extents,
// row-major LE payload.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw std::runtime_error("LKT1: truncated stream");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

template <typename S>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? 0 : 1;
}

}  // namespace detail

template <typename S>
void save_lkt1(std::ostream& os, const Tensor<S>& t) {
  os.write("LKT1", 4);
  detail::write_le<std::uint8_t>(os, detail::dtype_code<S>());
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (std::size_t i = 0; i < t.numel(); ++i) detail::write_le<S>(os, t[i]);
}

template <typename S>
Tensor<S> load_lkt1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LKT1", 4) != 0) throw std::runtime_error("LKT1: bad magic");
  auto dtype = detail::read_le<std::uint8_t>(is);
  if (dtype != detail::dtype_code<S>())
    throw std::runtime_error("LKT1: dtype code " + std::to_string(dtype) +
                             " does not match requested scalar");
  auto rank = detail::read_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = detail::read_le<std::uint32_t>(is);
  Tensor<S> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::read_le<S>(is);
  t.require_finite("load_lkt1");
  return t;
}

template <typename S>
void save_lkt1_file(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  save_lkt1(os, t);
}

template <typename S>
Tensor<S> load_lkt1_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path);
  return load_lkt1<S>(is);
}

}  // namespace lipkit
