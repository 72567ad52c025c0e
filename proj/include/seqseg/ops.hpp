#pragma once

// Differentiable primitives. Each forward has a matching *_backward that
// returns the input gradient and accumulates parameter gradients into a
// caller-owned buffer.

#include <cstdint>
#include <vector>

#include "seqseg/tensor.hpp"

namespace seqseg {

enum class Padding { same, valid };
enum class Phase { train, infer };
enum class Activation { relu, sigmoid, tanh };

// ---- conv2d ---------------------------------------------------------------

Shape4 conv2d_output_shape(const Shape4& in, const KernelBank& k, int stride,
                           Padding padding);

Tensor4 conv2d(const Tensor4& input, const KernelBank& k, int stride = 1,
               Padding padding = Padding::same);

/// Accumulates dL/dW and dL/db into `d_kernel` and returns dL/dinput (empty
/// when `need_input_grad` is false).
Tensor4 conv2d_backward(const Tensor4& input, const KernelBank& k,
                        const Tensor4& d_out, KernelBank& d_kernel,
                        int stride = 1, Padding padding = Padding::same,
                        bool need_input_grad = true);

// ---- maxpool2 ---------------------------------------------------------------

struct PoolResult {
  Tensor4 out;
  std::vector<std::int32_t> argmax;  // flat index into the input plane
  Shape4 in_shape;
};

/// 2x2 / stride 2 max pooling. Odd trailing rows/columns see -inf padding.
PoolResult maxpool2(const Tensor4& input);
Tensor4 maxpool2_backward(const PoolResult& pool, const Tensor4& d_out);

// ---- bilinear upsampling ----------------------------------------------------

/// Fixed bilinear interpolation, half-pixel (align_corners = false) sampling.
/// factor must be 2, 4 or 8.
Tensor4 bilinear_upsample(const Tensor4& input, int factor);
Tensor4 bilinear_upsample_backward(const Tensor4& d_out, int factor,
                                   const Shape4& in_shape);

// ---- batch normalization ---------------------------------------------------

struct BatchNormParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormParams() = default;
  explicit BatchNormParams(int channels);
  int channels() const { return static_cast<int>(gamma.size()); }
  bool operator==(const BatchNormParams&) const = default;
};

struct BatchNormCache {
  Phase phase = Phase::infer;
  Tensor4 x_hat;
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> inv_std;
  std::size_t count = 0;  // samples per channel
};

/// Pure: never touches running statistics. Call update_running_stats with
/// the train-phase cache to advance them.
Tensor4 batchnorm(const Tensor4& input, const BatchNormParams& p, Phase phase,
                  BatchNormCache* cache = nullptr);
void update_running_stats(BatchNormParams& p, const BatchNormCache& cache);
/// Accumulates into grads.gamma / grads.beta.
Tensor4 batchnorm_backward(const BatchNormParams& p,
                           const BatchNormCache& cache, const Tensor4& d_out,
                           BatchNormParams& grads);

// ---- pointwise / softmax ---------------------------------------------------

double sigmoid(double x);
Tensor4 pointwise(const Tensor4& input, Activation f);
/// Uses the forward output where cheaper (sigmoid, tanh).
Tensor4 pointwise_backward(const Tensor4& input, const Tensor4& output,
                           const Tensor4& d_out, Activation f);

Tensor4 softmax_channels(const Tensor4& logits);
Tensor4 softmax_channels_backward(const Tensor4& probs, const Tensor4& d_out);

/// Per-pixel argmax over channels; lowest class id wins ties.
std::vector<std::uint8_t> argmax_channels(const Tensor4& logits);

}  // namespace seqseg
