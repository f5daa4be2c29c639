#include "lamamba/tensor.hpp"

#include "gemm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace lamamba {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= e;
  }
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

Tensor::Tensor(Shape shape, double fill, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  data_.assign(static_cast<std::size_t>(numel_of(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  if (numel_of(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor(Shape{static_cast<std::int64_t>(values.size())}, std::vector<double>(values));
}

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw DimensionError("index rank mismatch for shape " + shape_str(shape_));
  }
  std::int64_t off = 0;
  std::size_t a = 0;
  for (auto i : idx) {
    if (i < 0 || i >= shape_[a]) throw DimensionError("index out of range");
    off = off * shape_[a] + i;
    ++a;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<std::int64_t> idx) const { return data_[offset(idx)]; }

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel_of(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_, dtype_);
}

Tensor Tensor::cast(DType dtype) const {
  Tensor out = *this;
  out.dtype_ = dtype;
  if (dtype == DType::f32) {
    for (auto& v : out.data_) v = static_cast<double>(static_cast<float>(v));
  }
  return out;
}

void ensure_finite(const Tensor& t, std::string_view op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Rng

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}
}  // namespace

Rng Rng::derive(std::uint64_t seed, std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return Rng(splitmix64(seed ^ splitmix64(h)));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw ContractError("uniform_int with empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t r = engine_();
  while (r >= limit) r = engine_();
  return lo + static_cast<std::int64_t>(r % span);
}

Tensor rand_normal(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Tensor rand_uniform(Rng& rng, const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

// ---------------------------------------------------------------------------
// Kernels

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw DimensionError("linear weight must be rank 2, got " + shape_str(w.shape()));
  if (x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::int64_t din = w.dim(0);
  const std::int64_t dout = w.dim(1);
  if (!b.empty() && (b.rank() != 1 || b.dim(0) != dout)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match output width " +
                         std::to_string(dout));
  }
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor y(out_shape);
  const std::int64_t rows = din == 0 ? 0 : x.numel() / din;
  const double* xp = x.ptr();
  const double* wp = w.ptr();
  double* yp = y.ptr();
  if (!b.empty())
    for (std::int64_t r = 0; r < rows; ++r) std::copy(b.ptr(), b.ptr() + dout, yp + r * dout);
  detail::gemm_acc(xp, false, wp, false, yp, rows, din, dout);
  ensure_finite(y, "linear");
  return y;
}

Tensor layer_norm(const Tensor& x, double eps) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw DimensionError("layer_norm needs a trailing extent >= 1");
  const std::int64_t d = x.dim(-1);
  Tensor y(x.shape());
  const std::int64_t rows = x.numel() / d;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * d;
    double* yr = y.ptr() + r * d;
    double mean = 0.0;
    for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double denom = std::sqrt(var + eps);
    for (std::int64_t i = 0; i < d; ++i) yr[i] = denom > 0.0 ? (xr[i] - mean) / denom : 0.0;
  }
  ensure_finite(y, "layer_norm");
  return y;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw DimensionError("softmax needs a trailing extent >= 1");
  const std::int64_t k = x.dim(-1);
  Tensor y(x.shape());
  const std::int64_t rows = x.numel() / k;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * k;
    double* yr = y.ptr() + r * k;
    const double m = *std::max_element(xr, xr + k);
    double s = 0.0;
    for (std::int64_t i = 0; i < k; ++i) {
      yr[i] = std::exp(xr[i] - m);
      s += yr[i];
    }
    for (std::int64_t i = 0; i < k; ++i) yr[i] /= s;
  }
  ensure_finite(y, "softmax");
  return y;
}

namespace {
template <class F>
Tensor map(const Tensor& x, F f, std::string_view name) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  ensure_finite(y, name);
  return y;
}
}  // namespace

Tensor silu(const Tensor& x) {
  return map(x, [](double v) { return v / (1.0 + std::exp(-v)); }, "silu");
}

Tensor gelu(const Tensor& x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return map(
      x, [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))); },
      "gelu");
}

Tensor softplus(const Tensor& x) {
  return map(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      "softplus");
}

}  // namespace lamamba
