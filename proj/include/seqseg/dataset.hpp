#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqseg/tensor.hpp"

namespace seqseg {

/// Class ids used by the synthetic bridge videos.
enum BridgeClass : std::uint8_t {
  kNonBridge = 0,
  kColumns = 1,
  kBeamsSlabs = 2,
  kOtherNonstructural = 3,
};
inline constexpr int kNumBridgeClasses = 4;
inline constexpr std::uint8_t kIgnoreLabel = 255;

const char* class_name(int id);

/// Per-pixel class ids, row-major. 255 marks pixels excluded from loss and
/// metrics.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> ids;

  LabelMap() = default;
  LabelMap(int h_, int w_, std::uint8_t fill = 0)
      : h(h_), w(w_), ids(static_cast<std::size_t>(h_) * w_, fill) {}

  std::uint8_t& at(int y, int x) { return ids[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const {
    return ids[static_cast<std::size_t>(y) * w + x];
  }
  std::size_t size() const { return ids.size(); }
  bool operator==(const LabelMap&) const = default;
};

struct Frame {
  Tensor4 image;  // (1, 3, h, w) in [0, 1]
  LabelMap label;
};

struct Sequence {
  std::string name;  // directory name, e.g. seq_00003
  std::vector<Frame> frames;
};

struct VideoDataset {
  int num_classes = kNumBridgeClasses;
  int height = 0;
  int width = 0;
  std::vector<Sequence> sequences;

  std::size_t frame_count() const;
  /// Pixel counts per class over every label map, ignore pixels skipped.
  /// Throws DataError on an id outside [0, num_classes).
  std::vector<std::int64_t> class_histogram() const;
};

/// Loads `<root>/<split>/seq_*/frame_*.ppm` + `label_*.pgm` in name order.
/// The class count comes from `<root>/manifest.json` when present.
/// Throws IoError for a missing directory and DataError for malformed files.
VideoDataset load_split(const std::filesystem::path& root, const std::string& split);

/// Loads one sequence directory (frames and labels) on its own.
Sequence load_sequence(const std::filesystem::path& dir);

}  // namespace seqseg
