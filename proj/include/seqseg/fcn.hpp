#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "seqseg/ops.hpp"
#include "seqseg/tensor.hpp"

namespace seqseg {

struct StageSpec {
  int blocks = 3;
  int channels = 16;
  bool operator==(const StageSpec&) const = default;
};

/// Residual FCN layout: 7x7 stride-2 stem, then stages of residual blocks with
/// a 2x2 maxpool between consecutive stages. `skip_taps` name the stages
/// whose outputs get a 1x1 prediction head; the last stage always feeds the
/// lowest-resolution head.
struct FcnConfig {
  int num_classes = 4;
  int in_channels = 3;
  int stem_channels = 16;
  int stem_kernel = 7;
  std::vector<StageSpec> stages{{3, 16}, {3, 32}, {3, 32}};
  std::vector<int> skip_taps{0, 1};
  int input_h = 48;
  int input_w = 64;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
  /// Input-to-lowest-head spatial reduction.
  int downsampling() const;
  int low_h() const { return input_h / downsampling(); }
  int low_w() const { return input_w / downsampling(); }

  static FcnConfig desk();
  /// Full-size template following the 45-layer table (constructible, not
  /// exercised by training tests).
  static FcnConfig fcn45();

  bool operator==(const FcnConfig&) const = default;
};

struct ConvBn {
  KernelBank conv;
  BatchNormParams bn;
};

/// conv-BN-ReLU, conv-BN, add input, ReLU.
struct ResidualBlock {
  ConvBn first;
  ConvBn second;
};

struct FcnStage {
  /// Present when the stage widens channels; a plain conv-BN-ReLU with no
  /// shortcut.
  std::optional<ConvBn> transition;
  std::vector<ResidualBlock> blocks;
};

struct FcnParams {
  FcnConfig config;
  ConvBn stem;
  std::vector<FcnStage> stages;
  KernelBank low_head;
  std::vector<KernelBank> skip_heads;  // parallel to config.skip_taps

  /// Weights in a fixed order; running statistics are included as
  /// non-trainable entries so checkpoints capture them.
  std::vector<ParamView> views();
  /// Same structure, every value zero. Used as a gradient accumulator.
  FcnParams zeros_like() const;
  std::size_t trainable_count();
};

/// Per-frame FCN outputs, all in logit (pre-softmax) space.
struct LogitsBundle {
  Tensor4 logits_low;
  std::vector<Tensor4> skip_logits;  // parallel to config.skip_taps
  Tensor4 logits_full;
};

/// Deterministic in (config, seed): He-normal conv weights, zero biases,
/// identity batchnorm.
FcnParams build_fcn(const FcnConfig& config, std::uint64_t seed);

/// Activations kept for the backward pass.
struct FcnTape {
  struct LayerCache {
    Tensor4 input;
    BatchNormCache bn;
    Tensor4 pre_relu;  // BN output (or BN output + shortcut)
    Tensor4 output;
  };
  struct BlockCache {
    LayerCache first;
    LayerCache second;
  };
  struct StageCache {
    std::optional<PoolResult> pool;
    std::optional<LayerCache> transition;
    std::vector<BlockCache> blocks;
    Tensor4 output;
  };
  Tensor4 image;
  LayerCache stem;
  std::vector<StageCache> stages;
};

LogitsBundle fcn_forward(const FcnParams& params, const Tensor4& image,
                         Phase phase, FcnTape* tape = nullptr);

/// Skip merge in logit space: the running map is bilinearly upsampled to the
/// next tap's resolution and added to that tap's logits, finishing with an
/// upsample to (full_h, full_w).
Tensor4 merge_logits(const Tensor4& low, const std::vector<Tensor4>& skips,
                     int full_h, int full_w);

struct MergeGrads {
  Tensor4 d_low;
  std::vector<Tensor4> d_skips;
};
MergeGrads merge_logits_backward(const Tensor4& d_full, const Shape4& low_shape,
                                 const std::vector<Shape4>& skip_shapes);

/// Substitutes the lowest-resolution logits and reruns only the merge.
LogitsBundle replace_low_logits(const LogitsBundle& bundle,
                                const Tensor4& new_low);

/// Backpropagates head-logit gradients through the network, accumulating
/// parameter gradients into `grads`. Returns d image (empty unless asked).
Tensor4 fcn_backward(const FcnParams& params, const FcnTape& tape,
                     const MergeGrads& d_heads, FcnParams& grads,
                     bool need_input_grad = false);

/// Advances every BN layer's running statistics from a train-phase tape.
void apply_running_stats(FcnParams& params, const FcnTape& tape);

}  // namespace seqseg
