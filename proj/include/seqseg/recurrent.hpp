#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "seqseg/ops.hpp"
#include "seqseg/tensor.hpp"

namespace seqseg {

enum class CellKind { simple, convlstm };

/// How the ConvLSTM peephole weights broadcast over the state.
enum class PeepholeMode {
  per_channel,  // one scalar per hidden channel
  per_element,  // one weight per (channel, y, x); needs state_h/state_w
};

/// Which cell state the output gate reads: the freshly updated one (standard
/// ConvLSTM) or the previous one.
enum class OutputGatePeek { new_state, old_state };

/// Whether the head output replaces the FCN's lowest-resolution logits or is
/// added to them before the skip merge.
enum class HeadMerge { replace, add };

struct RnnConfig {
  CellKind cell = CellKind::convlstm;
  int layers = 3;
  int kernel_h = 3;
  int kernel_w = 3;
  int hidden = 8;
  int unroll = 5;
  int input_channels = 4;   // FCN class count
  int output_channels = 4;  // FCN class count
  PeepholeMode peephole = PeepholeMode::per_channel;
  int state_h = 0;  // only used with per_element peepholes
  int state_w = 0;
  OutputGatePeek output_peek = OutputGatePeek::new_state;
  HeadMerge merge = HeadMerge::add;
  double forget_bias = 1.0;

  void validate() const;
  static RnnConfig desk(CellKind cell, int num_classes = 4);
  /// Three 5x5 layers of depth 15 with unroll 5, as used at full scale.
  static RnnConfig full_scale(CellKind cell, int num_classes = 5);

  bool operator==(const RnnConfig&) const = default;
};

std::string to_string(CellKind kind);
CellKind parse_cell_kind(const std::string& s);

/// One recurrent layer's state. The simple cell only uses `o`; `s` stays zero.
struct CellState {
  Tensor4 s;
  Tensor4 o;
  bool operator==(const CellState&) const = default;
};
using HeadState = std::vector<CellState>;

/// Gates are fused along the output-channel axis in the order
/// input (i), forget (f), candidate (g), output (o).
struct ConvLstmLayer {
  KernelBank input_kernel;      // W_x* and the four gate biases
  KernelBank recurrent_kernel;  // W_o*, no bias
  Tensor4 peep_i;               // (1, hidden, ph, pw), ph = pw = 1 when per-channel
  Tensor4 peep_f;
  Tensor4 peep_o;
};

/// o_t = relu(U * x_t + W * o_{t-1} + b)
struct SimpleRnnLayer {
  KernelBank input_kernel;      // U and b
  KernelBank recurrent_kernel;  // W, no bias
};

struct HeadParams {
  RnnConfig config;
  std::vector<ConvLstmLayer> lstm;    // filled when config.cell == convlstm
  std::vector<SimpleRnnLayer> simple; // filled when config.cell == simple
  KernelBank readout;                 // 1x1, hidden -> output_channels

  std::vector<ParamView> views();
  HeadParams zeros_like() const;
};

HeadParams build_head(const RnnConfig& config, std::uint64_t seed);

// ---- single steps ------------------------------------------------------------

struct SimpleStepCache {
  Tensor4 x;
  Tensor4 prev_o;
  Tensor4 pre;
  Tensor4 out;
};

Tensor4 simple_rnn_step(const SimpleRnnLayer& layer, const Tensor4& x,
                        const Tensor4& prev_o, SimpleStepCache* cache = nullptr);

struct SimpleStepGrads {
  Tensor4 d_x;
  Tensor4 d_prev_o;
};
SimpleStepGrads simple_rnn_step_backward(const SimpleRnnLayer& layer,
                                         const SimpleStepCache& cache,
                                         const Tensor4& d_out,
                                         SimpleRnnLayer& grads);

struct LstmStepCache {
  Tensor4 x;
  CellState prev;
  Tensor4 i, f, g, og;  // gate activations
  Tensor4 s;            // new cell state
  Tensor4 tanh_s;
};

CellState convlstm_step(const ConvLstmLayer& layer, const Tensor4& x,
                        const CellState& prev,
                        OutputGatePeek peek = OutputGatePeek::new_state,
                        LstmStepCache* cache = nullptr);

struct LstmStepGrads {
  Tensor4 d_x;
  CellState d_prev;
};
/// `d_next` holds dL/ds_t and dL/do_t.
LstmStepGrads convlstm_step_backward(const ConvLstmLayer& layer,
                                     const LstmStepCache& cache,
                                     const CellState& d_next,
                                     OutputGatePeek peek, ConvLstmLayer& grads);

// ---- head ------------------------------------------------------------------------

/// All-zero state for every layer at the given low-resolution dims.
HeadState init_state(const RnnConfig& config, int h, int w);

/// Throws ContractViolation if `state` was not made for this config/dims.
void check_state(const RnnConfig& config, const HeadState& state, int h, int w);

struct HeadFrameCache {
  std::vector<SimpleStepCache> simple;
  std::vector<LstmStepCache> lstm;
  Tensor4 top;  // last layer output fed to the readout
};

/// One frame through the stack plus readout; advances `state` in place.
Tensor4 head_step(const HeadParams& params, const Tensor4& low_logits,
                  HeadState& state, HeadFrameCache* cache = nullptr);

struct HeadRun {
  std::vector<Tensor4> outputs;
  HeadState final_state;
};
HeadRun head_forward(const HeadParams& params,
                     std::span<const Tensor4> low_logits_sequence,
                     HeadState state);

/// Backward through one frame. `d_state` carries dL/d(state after the frame)
/// on entry and dL/d(state before the frame) on exit.
void head_step_backward(const HeadParams& params, const HeadFrameCache& cache,
                        const Tensor4& d_out, HeadState& d_state,
                        HeadParams& grads, Tensor4* d_input = nullptr);

/// Per-frame loss callback: returns the loss for window frame `t` and writes
/// dL/d(head output) into `d_out`.
using FrameLossFn =
    std::function<double(std::size_t t, const Tensor4& out, Tensor4& d_out)>;

struct BpttResult {
  HeadParams grads;
  HeadState carried;        // forward state at window end (detached)
  HeadState d_initial;      // dL/d(carried-in state); not used for training
  double loss = 0.0;        // summed over the window
  std::vector<Tensor4> outputs;
};

/// Full backpropagation through one truncation window. No gradient reaches
/// earlier windows; the returned `carried` state seeds the next one.
BpttResult bptt_step(const HeadParams& params,
                     std::span<const Tensor4> window, const HeadState& carried,
                     const FrameLossFn& loss);

}  // namespace seqseg
