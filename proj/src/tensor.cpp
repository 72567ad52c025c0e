#include "seqseg/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "seqseg/errors.hpp"

namespace seqseg {

std::string Shape4::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" +
         std::to_string(h) + "x" + std::to_string(w);
}

Tensor4::Tensor4(Shape4 shape, double fill) : shape_(shape) {
  SEQSEG_REQUIRE(shape.n >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
                 "tensor dims must be >= 1, got " + shape.str());
  data_.assign(shape.count(), fill);
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> values)
    : shape_(shape), data_(values.begin(), values.end()) {
  SEQSEG_REQUIRE(shape.n >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
                 "tensor dims must be >= 1, got " + shape.str());
  SEQSEG_REQUIRE(data_.size() == shape.count(),
                 "tensor data length does not match " + shape.str());
}

void Tensor4::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor4::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor4& Tensor4::operator+=(const Tensor4& other) {
  SEQSEG_REQUIRE(shape_ == other.shape_, "tensor add: shape " + shape_.str() +
                                             " vs " + other.shape_.str());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor4& Tensor4::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor4 operator+(Tensor4 a, const Tensor4& b) {
  a += b;
  return a;
}

Tensor4 hadamard(const Tensor4& a, const Tensor4& b) {
  SEQSEG_REQUIRE(a.shape() == b.shape(), "hadamard: shape mismatch");
  Tensor4 out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

double dot(const Tensor4& a, const Tensor4& b) {
  SEQSEG_REQUIRE(a.shape() == b.shape(), "dot: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  SEQSEG_REQUIRE(a.shape() == b.shape(), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void require_finite(const Tensor4& t, const char* where) {
  if (!t.all_finite())
    throw NumericError(std::string("non-finite value in ") + where);
}

KernelBank::KernelBank(int out_c, int in_c, int kh, int kw, bool with_bias)
    : weights(Shape4{out_c, in_c, kh, kw}) {
  SEQSEG_REQUIRE(kh % 2 == 1 && kw % 2 == 1, "kernel sizes must be odd");
  if (with_bias) bias.assign(out_c, 0.0);
}

KernelBank KernelBank::zeros_like() const {
  KernelBank k;
  k.weights = Tensor4::zeros_like(weights);
  k.bias.assign(bias.size(), 0.0);
  return k;
}

void append_views(std::vector<ParamView>& out, const std::string& prefix,
                  KernelBank& k) {
  append_view(out, prefix + ".w", k.weights, true, true);
  if (k.has_bias()) append_view(out, prefix + ".b", k.bias);
}

void append_view(std::vector<ParamView>& out, const std::string& name,
                 Tensor4& t, bool trainable, bool decay) {
  const auto& s = t.shape();
  out.push_back({name, {s.n, s.c, s.h, s.w}, t.values(), trainable, decay});
}

void append_view(std::vector<ParamView>& out, const std::string& name,
                 std::vector<double>& v, bool trainable, bool decay) {
  out.push_back({name,
                 {static_cast<std::int32_t>(v.size()), 1, 1, 1},
                 std::span<double>(v),
                 trainable,
                 decay});
}

}  // namespace seqseg
