#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace seqseg {

struct Shape4 {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

/// Tensor storage starts on a cache-line boundary so vectorized kernels see
/// the same alignment for the same shape on every run.
template <class T>
struct CacheAlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  CacheAlignedAllocator() = default;
  template <class U>
  CacheAlignedAllocator(const CacheAlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), alignment));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const CacheAlignedAllocator<U>&) const { return true; }
};

using TensorStorage = std::vector<double, CacheAlignedAllocator<double>>;

/// Dense NCHW array of doubles. Every op in this library takes and returns
/// these by value; a default-constructed tensor is empty and only serves as
/// a placeholder (e.g. "input gradient not requested").
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0);
  Tensor4(Shape4 shape, std::vector<double> values);

  static Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.shape()); }

  const Shape4& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int n, int c, int y, int x) {
    return data_[index(n, c, y, x)];
  }
  double operator()(int n, int c, int y, int x) const {
    return data_[index(n, c, y, x)];
  }
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const double* plane(int n, int c) const {
    return data_.data() + index(n, c, 0, 0);
  }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v);
  bool all_finite() const;

  Tensor4& operator+=(const Tensor4& other);
  Tensor4& operator*=(double s);

  bool operator==(const Tensor4& other) const = default;

 private:
  Shape4 shape_{0, 0, 0, 0};
  TensorStorage data_;
};

Tensor4 operator+(Tensor4 a, const Tensor4& b);
Tensor4 hadamard(const Tensor4& a, const Tensor4& b);
double dot(const Tensor4& a, const Tensor4& b);
double max_abs_diff(const Tensor4& a, const Tensor4& b);
double l2_norm(std::span<const double> v);

/// Throws NumericError naming `where` if any element is NaN/Inf.
void require_finite(const Tensor4& t, const char* where);

/// Convolution weights (out_c, in_c, kh, kw) plus per-output bias. An empty
/// bias vector means the bank has no bias term.
struct KernelBank {
  Tensor4 weights;
  std::vector<double> bias;

  KernelBank() = default;
  KernelBank(int out_c, int in_c, int kh, int kw, bool with_bias = true);

  int out_channels() const { return weights.n(); }
  int in_channels() const { return weights.c(); }
  int kernel_h() const { return weights.h(); }
  int kernel_w() const { return weights.w(); }
  bool has_bias() const { return !bias.empty(); }

  KernelBank zeros_like() const;
  bool operator==(const KernelBank&) const = default;
};

/// Mutable view of one named parameter buffer. Models expose their weights
/// and gradients as identically ordered lists of these.
struct ParamView {
  std::string name;
  std::array<std::int32_t, 4> dims;
  std::span<double> values;
  bool trainable = true;
  bool decay = false;
};

void append_views(std::vector<ParamView>& out, const std::string& prefix,
                  KernelBank& k);
void append_view(std::vector<ParamView>& out, const std::string& name,
                 Tensor4& t, bool trainable = true, bool decay = false);
void append_view(std::vector<ParamView>& out, const std::string& name,
                 std::vector<double>& v, bool trainable = true,
                 bool decay = false);

}  // namespace seqseg
