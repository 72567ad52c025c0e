#pragma once

// Parameter file: the 8-byte magic "SEQSEG01" followed by records until EOF.
// Each record is a little-endian uint32 name length, the name bytes, four
// little-endian int32 dims and dims-product little-endian float64 values.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "seqseg/fcn.hpp"
#include "seqseg/recurrent.hpp"

namespace seqseg {

inline constexpr char kCheckpointMagic[] = "SEQSEG01";

struct NamedTensor {
  std::string name;
  std::array<std::int32_t, 4> dims{};
  std::vector<double> values;
  bool operator==(const NamedTensor&) const = default;
};

void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path);

std::vector<NamedTensor> snapshot(const std::vector<ParamView>& views);
/// Copies every view's values from the tensor of the same name. Missing
/// names or dim mismatches raise CompatibilityError.
void restore(const std::vector<ParamView>& views,
             const std::vector<NamedTensor>& tensors);

/// A frozen FCN optionally topped by a recurrent head.
struct SegModel {
  FcnParams fcn;
  std::optional<HeadParams> head;
};

/// Architecture configs travel as "meta.fcn" / "meta.rnn" records holding
/// integer fields as float64, so a checkpoint is self-describing.
void save_model(const std::filesystem::path& path, SegModel& model);
SegModel load_model(const std::filesystem::path& path);

}  // namespace seqseg
