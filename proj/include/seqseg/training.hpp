#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "seqseg/dataset.hpp"
#include "seqseg/fcn.hpp"
#include "seqseg/recurrent.hpp"
#include "seqseg/tensor.hpp"

namespace seqseg {

// ---- losses -------------------------------------------------------------------

/// w_c = median(f) / f_c with f_c = count_c / total. The median is taken over
/// classes with nonzero count (lower median for an even number of them);
/// absent classes get weight 0. Throws DataError if every count is zero.
std::vector<double> median_frequency_weights(std::span<const std::int64_t> counts);

struct LossResult {
  double loss = 0.0;
  Tensor4 d_logits;
};

/// loss = -(1/N) sum_p w[y_p] log softmax(logits_p)[y_p] over the N pixels
/// whose label is not 255. `labels` holds one map per batch item.
/// Throws DataError for a label outside [0, classes) and ContractViolation
/// for size mismatches.
LossResult weighted_cross_entropy(const Tensor4& logits, std::span<const LabelMap> labels,
                                  std::span<const double> class_weights);

// ---- optimizers ---------------------------------------------------------------

enum class OptimizerKind { adam, sgd };

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamOptions&) const = default;
};

/// Updates every trainable view in place. Weight decay is coupled: lambda *
/// theta is added to the gradient of views flagged `decay` before the step.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::adam, AdamOptions adam = {});

  void step(const std::vector<ParamView>& params, const std::vector<ParamView>& grads,
            double lr, double weight_decay);
  long steps() const { return steps_; }

 private:
  OptimizerKind kind_;
  AdamOptions adam_;
  long steps_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
double clip_global_norm(const std::vector<ParamView>& grads, double max_norm);

// ---- frame sampling -----------------------------------------------------------

/// Splits [0, count) into consecutive blocks of `block_size` (the last one may
/// be shorter, size m), draws as many integers as the block length uniformly
/// from [0, block length) with replacement, and keeps the frames whose offset
/// was drawn at least once. Result is sorted and duplicate-free.
std::vector<std::size_t> block_sample_frames(std::size_t count, std::size_t block_size,
                                             std::uint64_t seed);

// ---- training plans -------------------------------------------------------------

enum class TrainStage { fcn, rnn };

struct LrPhase {
  int epochs = 1;
  double lr = 1e-4;
  bool operator==(const LrPhase&) const = default;
};

struct TrainPlan {
  TrainStage stage = TrainStage::fcn;
  std::vector<LrPhase> phases{{6, 1e-4}, {3, 1e-5}, {1, 1e-6}};
  int batch_size = 4;  // FCN stage only; the recurrent stage streams one sequence
  double weight_decay = 1e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamOptions adam;
  std::uint64_t seed = 1;
  std::size_t block_size = 1000;
  bool resample_each_epoch = true;
  bool augment = true;      // flip + brightness jitter, FCN stage only
  double clip_norm = 0.0;   // 0 disables clipping
  bool log_wall_time = false;  // false writes 0 so loss logs compare bytewise

  void validate() const;
  int total_epochs() const;
  static TrainPlan fcn_default();
  static TrainPlan rnn_default(CellKind cell);
  bool operator==(const TrainPlan&) const = default;
};

std::string to_string(TrainStage s);
std::string to_string(OptimizerKind k);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
  bool operator==(const EpochLog&) const = default;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Header `epoch,phase_lr,mean_loss,wall_seconds`, one row per epoch.
void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);
std::vector<EpochLog> read_loss_csv(const std::filesystem::path& path);

/// Class weights for a dataset: median-frequency balancing over its labels.
std::vector<double> dataset_class_weights(const VideoDataset& data);

/// Trains every FCN parameter on individual frames with train-phase batch
/// norm. Deterministic given the plan seed.
std::vector<EpochLog> train_fcn(FcnParams& fcn, const VideoDataset& data,
                                const TrainPlan& plan,
                                const EpochCallback& on_epoch = {});

/// Per-frame FCN outputs needed by the recurrent stage; `logits_full` is left
/// empty to save memory.
std::vector<std::vector<LogitsBundle>> precompute_logits(const FcnParams& fcn,
                                                         const VideoDataset& data);

/// Merges a head output into the FCN's low-resolution logits per the
/// configured mode, then runs the skip merge to full resolution.
Tensor4 composite_logits(const LogitsBundle& fcn_out, const Tensor4& head_out,
                         HeadMerge merge, int full_h, int full_w);

/// One truncation window of the recurrent stage: frames are given as their
/// precomputed FCN bundles and labels. Loss is the per-frame weighted
/// cross-entropy of the composite full-resolution logits.
BpttResult rnn_window(const HeadParams& head, std::span<const LogitsBundle> bundles,
                      std::span<const LabelMap> labels,
                      std::span<const double> class_weights, const HeadState& carried);

/// Trains only the recurrent head (cells and readout) over block-sampled
/// frames in temporal order; the FCN is read-only.
std::vector<EpochLog> train_rnn(HeadParams& head, const FcnParams& fcn,
                                const VideoDataset& data, const TrainPlan& plan,
                                const EpochCallback& on_epoch = {});

}  // namespace seqseg
