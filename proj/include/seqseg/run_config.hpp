#pragma once

// JSON run configuration shared by the command-line subcommands. Every
// section and key is optional; missing keys keep the desk defaults and
// unknown keys are rejected so typos surface as config errors.
//
// {
//   "seed": 1,
//   "synth":     { "train_sequences", "test_sequences", "frames_per_sequence",
//                  "height", "width", "seed", "walk": { ... } },
//   "fcn":       { "num_classes", "stem_channels", "stem_kernel",
//                  "stages": [[blocks, channels], ...], "skip_taps": [...],
//                  "input_h", "input_w" },
//   "rnn":       { "cell", "layers", "kernel": [kh, kw], "hidden", "unroll",
//                  "peephole", "output_peek", "merge", "forget_bias" },
//   "train_fcn": { plan keys },
//   "train_rnn": { plan keys },
//   "paths":     { "data", "out", "report" }
// }
//
// Plan keys: "phases": [[epochs, lr], ...], "batch_size", "weight_decay",
// "optimizer", "seed", "block_size", "resample_each_epoch", "augment",
// "clip_norm", "log_wall_time", "adam": { "beta1", "beta2", "eps" }.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "seqseg/fcn.hpp"
#include "seqseg/recurrent.hpp"
#include "seqseg/synthworld.hpp"
#include "seqseg/training.hpp"

namespace seqseg {

struct RunPaths {
  std::string data;
  std::string out;
  std::string report;
  bool operator==(const RunPaths&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 1;  // model initialisation
  SynthConfig synth;
  FcnConfig fcn = FcnConfig::desk();
  RnnConfig rnn = RnnConfig::desk(CellKind::convlstm);
  TrainPlan fcn_plan = TrainPlan::fcn_default();
  TrainPlan rnn_plan = TrainPlan::rnn_default(CellKind::convlstm);
  /// Set when the config gave train_rnn.clip_norm; otherwise the cell default
  /// applies (see rnn_plan_for).
  std::optional<double> rnn_clip_norm;
  RunPaths paths;

  /// Recurrent plan for a cell kind, honouring an explicit clip_norm.
  TrainPlan rnn_plan_for(CellKind cell) const;
  /// Sets the top-level seed and every stage seed.
  void set_seed(std::uint64_t s);
  /// Throws ConfigError on the first invalid section.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Parses a config document. A top-level "seed" seeds every stage; a seed
/// inside a section overrides it for that section. Throws ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);

/// Reads and parses a file: IoError if it cannot be opened, ConfigError on
/// malformed JSON or invalid values.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& config);

}  // namespace seqseg
