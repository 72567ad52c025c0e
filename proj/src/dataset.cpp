#include "seqseg/dataset.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "seqseg/errors.hpp"
#include "seqseg/image_io.hpp"

namespace seqseg {

namespace fs = std::filesystem;

const char* class_name(int id) {
  switch (id) {
    case kNonBridge: return "non_bridge";
    case kColumns: return "columns";
    case kBeamsSlabs: return "beams_slabs";
    case kOtherNonstructural: return "other_nonstructural";
    default: return "unknown";
  }
}

std::size_t VideoDataset::frame_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.frames.size();
  return n;
}

std::vector<std::int64_t> VideoDataset::class_histogram() const {
  std::vector<std::int64_t> counts(num_classes, 0);
  for (const auto& s : sequences)
    for (const auto& f : s.frames)
      for (std::uint8_t id : f.label.ids) {
        if (id == kIgnoreLabel) continue;
        if (id >= num_classes)
          throw DataError("label id " + std::to_string(id) + " in " + s.name +
                          " exceeds class count " + std::to_string(num_classes));
        ++counts[id];
      }
  return counts;
}

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, const std::string& prefix,
                                     bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind(prefix, 0) != 0) continue;
    if (directories != e.is_directory()) continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Sequence load_sequence(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("sequence directory not found: " + dir.string());
  Sequence seq;
  seq.name = dir.filename().string();
  for (const auto& frame_path : sorted_entries(dir, "frame_", false)) {
    if (frame_path.extension() != ".ppm") continue;
    const std::string stem = frame_path.stem().string();  // frame_0007
    const fs::path label_path = dir / ("label_" + stem.substr(6) + ".pgm");
    Frame f;
    f.image = read_ppm(frame_path);
    const GrayImage8 lab = read_pgm8(label_path);
    if (lab.h != f.image.h() || lab.w != f.image.w())
      throw DataError("label size differs from frame size: " + label_path.string());
    f.label.h = lab.h;
    f.label.w = lab.w;
    f.label.ids = lab.pixels;
    seq.frames.push_back(std::move(f));
  }
  if (seq.frames.empty()) throw DataError("no frames in " + dir.string());
  return seq;
}

VideoDataset load_split(const fs::path& root, const std::string& split) {
  const fs::path dir = root / split;
  if (!fs::is_directory(dir)) throw IoError("dataset split not found: " + dir.string());
  VideoDataset ds;
  const fs::path manifest = root / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    try {
      const auto j = nlohmann::json::parse(in);
      ds.num_classes = j.value("num_classes", kNumBridgeClasses);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed manifest " + manifest.string() + ": " + e.what());
    }
  }
  for (const auto& seq_dir : sorted_entries(dir, "seq_", true))
    ds.sequences.push_back(load_sequence(seq_dir));
  if (ds.sequences.empty()) throw DataError("no sequences under " + dir.string());
  ds.height = ds.sequences[0].frames[0].image.h();
  ds.width = ds.sequences[0].frames[0].image.w();
  for (const auto& s : ds.sequences)
    for (const auto& f : s.frames)
      if (f.image.h() != ds.height || f.image.w() != ds.width)
        throw DataError("frame size differs across the split in " + s.name);
  return ds;
}

}  // namespace seqseg
