#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace utuning {

using Shape = std::vector<int64_t>;

/// Thrown when operand extents do not line up. The message always carries
/// both offending shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an API contract is violated (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Thrown when a non-finite value is detected in numerics-checking mode, or
/// when a training run diverges.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for invalid run/tuning configurations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Precision { f64, f32 };

/// Global precision switch. f64 is the default and is required by the
/// verification suites; f32 rounds every primitive-op result through IEEE
/// single precision and is meant for training runs only.
void set_precision(Precision p);
Precision precision();

/// When enabled, every primitive op asserts that its result is finite.
/// Off by default (training mode); verification commands turn it on.
void set_numeric_checks(bool enabled);
bool numeric_checks();

std::string shape_str(const Shape& s);

/// Dense row-major multidimensional array of doubles. Rank 0 (shape {})
/// denotes a scalar with one element.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);
  Tensor(Shape shape, double fill_value);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v);
  static Tensor matrix(int64_t rows, int64_t cols, std::vector<double> v);
  static Tensor identity(int64_t n);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const;  // negative indices count from the back
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool is_scalar() const { return data_.size() == 1 && shape_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  Tensor& fill(double v);
  Tensor& add_(const Tensor& other);  // same-shape accumulate
  Tensor& scale_(double c);

  /// Bit-exact comparison (shape and every element).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

int64_t shape_numel(const Shape& s);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Deterministic random source. `split` derives an independent stream so
/// that per-sample / per-parameter draws do not depend on call order.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform(double lo, double hi);
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds
  uint64_t raw();

  Rng split(uint64_t stream) const;

  Tensor normal_tensor(Shape shape, double stddev = 1.0, double mean = 0.0);
  Tensor uniform_tensor(Shape shape, double lo, double hi);
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_;
};

/// Applies the global precision / numeric-check policy to a freshly
/// computed tensor. Every primitive op funnels its output through this.
void finalize_value(Tensor& t, const char* op_name);

}  // namespace utuning
