#include "utuning/tensor.hpp"

#include <cmath>
#include <sstream>

namespace utuning {

namespace {
thread_local Precision g_precision = Precision::f64;
thread_local bool g_numeric_checks = false;
}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }
void set_numeric_checks(bool enabled) { g_numeric_checks = enabled; }
bool numeric_checks() { return g_numeric_checks; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  for (int64_t d : shape_) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  }
  data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, double fill_value) : Tensor(std::move(shape)) { fill(fill_value); }

Tensor Tensor::row(std::vector<double> v) {
  Shape s{static_cast<int64_t>(v.size())};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(int64_t rows, int64_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

Tensor Tensor::identity(int64_t n) {
  Tensor t(Shape{n, n});
  for (int64_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

int64_t Tensor::dim(int64_t i) const {
  int64_t r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) {
    throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<size_t>(i)];
}

double& Tensor::at(std::initializer_list<int64_t> idx) {
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    flat = flat * shape_[k] + i;
    ++k;
  }
  return data_[static_cast<size_t>(flat)];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  return const_cast<Tensor*>(this)->at(idx);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor& Tensor::fill(double v) {
  std::fill(data_.begin(), data_.end(), v);
  return *this;
}

Tensor& Tensor::add_(const Tensor& other) {
  if (!same_shape(other)) {
    throw DimensionError("add_: shape mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  }
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::scale_(double c) {
  for (double& v : data_) v *= c;
  return *this;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

Rng::Rng(uint64_t seed) : gen_(seed ^ 0x9e3779b97f4a7c15ull), seed_(seed) {}

double Rng::normal(double mean, double stddev) {
  std::normal_distribution<double> d(mean, stddev);
  return d(gen_);
}

double Rng::uniform(double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(gen_);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  std::uniform_int_distribution<int64_t> d(lo, hi);
  return d(gen_);
}

uint64_t Rng::raw() { return gen_(); }

Rng Rng::split(uint64_t stream) const {
  // splitmix64 mix of (seed, stream) keeps derived streams independent of
  // how many draws were taken from this one.
  uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z = z ^ (z >> 31);
  return Rng(z);
}

Tensor Rng::normal_tensor(Shape shape, double stddev, double mean) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
  return t;
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
  return t;
}

void finalize_value(Tensor& t, const char* op_name) {
  if (g_precision == Precision::f32) {
    double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  }
  if (g_numeric_checks && !t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name);
  }
}

}  // namespace utuning
