#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lamamba {

// Error taxonomy shared across the library. Everything derives from
// std::runtime_error so callers that only care about "it failed" can catch
// a single type.
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major real array.
///
/// Values are always held in double precision; the dtype tag records the
/// storage precision used when the tensor is serialized. A tensor tagged
/// f32 has every value exactly representable as a float (enforced by
/// `cast`).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, DType dtype = DType::f64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::f64);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor from(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  /// Extent of axis `axis`; negative values count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }
  DType dtype() const { return dtype_; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  double& at(std::initializer_list<std::int64_t> idx);
  double at(std::initializer_list<std::int64_t> idx) const;
  double item() const;

  Tensor reshaped(Shape shape) const;
  /// Copy with values rounded to the storage precision of `dtype`.
  Tensor cast(DType dtype) const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> idx) const;

  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::f64;
};

/// Throws NumericError naming `op` when any value is NaN or infinite.
void ensure_finite(const Tensor& t, std::string_view op);

double max_abs_diff(const Tensor& a, const Tensor& b);

/// Project-wide random stream: mt19937_64 for raw bits, 53-bit uniform
/// doubles, Box-Muller normals. Independent of the standard library's
/// distribution implementations so streams match across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  /// Stream keyed by (seed, label); used for per-parameter initialization so
  /// any subset of a model can be rebuilt without replaying the whole stream.
  static Rng derive(std::uint64_t seed, std::string_view label);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double normal();
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);  // inclusive

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Tensor rand_normal(Rng& rng, const Shape& shape);
Tensor rand_uniform(Rng& rng, const Shape& shape);

// Primitive forward kernels. All are pure; the autodiff layer reuses them.

/// y[..., j] = sum_i x[..., i] * w[i, j] (+ b[j]). `b` may be empty.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});
/// Per trailing vector: (x - mean) / sqrt(var + eps), population variance.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);
Tensor softmax(const Tensor& x);
Tensor silu(const Tensor& x);
/// tanh approximation.
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-6;

}  // namespace lamamba
