#pragma once

// Procedural bridge world: axis-aligned boxes over a ground plane, a
// random-walk camera, and a one-ray-per-pixel renderer producing frames,
// label maps and depth maps.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "seqseg/dataset.hpp"
#include "seqseg/tensor.hpp"

namespace seqseg {

using Vec3 = std::array<double, 3>;  // x east, y north, z up (meters)

/// Surface look. Concrete is shared by columns and beams/slabs.
enum class Material : std::uint8_t { concrete, foliage, bark, sign, metal };

struct Box {
  Vec3 lo{};
  Vec3 hi{};
  std::uint8_t label = kBeamsSlabs;
  Material material = Material::concrete;
  std::uint32_t texture_seed = 0;
  double albedo = 0.6;  // base brightness before texture and shading
  bool operator==(const Box&) const = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Box> boxes;
  Vec3 world_lo{};  // camera bounds
  Vec3 world_hi{};
  double deck_bottom = 0.0;  // underside of the slab
  int column_count = 0;
  std::uint32_t ground_seed = 0;
  bool operator==(const SceneSpec&) const = default;
};

SceneSpec build_scene(std::uint64_t seed);

struct CameraPose {
  Vec3 position{};
  double heading = 0.0;  // radians, 0 looks along +x, counter-clockwise
  double pitch = 0.0;    // radians, positive looks up
  double fov = 1.0471975511965976;  // horizontal field of view (60 degrees)
  bool jump = false;     // an abrupt redraw happened on this frame
  bool operator==(const CameraPose&) const = default;
};

struct WalkParams {
  double p_jump = 0.02;
  double cycle_frames = 70.0;  // period of the approach/retreat drift
  double near_distance = 0.9;  // closest standoff from the target surface
  double far_distance = 26.0;
  double position_noise = 0.12;  // meters per frame
  double angle_noise = 0.02;     // radians per frame
  bool operator==(const WalkParams&) const = default;
};

std::vector<CameraPose> random_walk_camera(const SceneSpec& scene, std::uint64_t seed,
                                           int length, const WalkParams& params = {});

struct Ray {
  Vec3 origin{};
  Vec3 dir{};  // unit length
};

/// Primary ray through the centre of pixel (y, x) of an h x w image with
/// square pixels.
Ray camera_ray(const CameraPose& pose, int h, int w, int y, int x);

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int box = -1;       // index into scene.boxes, -1 ground, -2 sky
  int axis = 2;       // axis of the face normal
  int sign = 1;       // +1 or -1
  std::uint8_t label = kNonBridge;
  Vec3 point{};
};

/// Nearest hit along the ray (slab test per box, then the ground plane z = 0).
Hit trace(const SceneSpec& scene, const Ray& ray);

struct RenderOutput {
  Tensor4 rgb;                // (1, 3, h, w) in [0, 1]
  LabelMap label;
  std::vector<double> depth;  // meters along the ray; +inf where nothing is hit
};

RenderOutput render(const SceneSpec& scene, const CameraPose& pose, int h, int w);

/// Concrete albedo at a surface point of a box face (texture only, before
/// shading and haze). Exposed for texture statistics.
double concrete_texture(const Box& box, int axis, const Vec3& point);

/// Fraction of pixels labelled as any bridge class (ids 1..3).
double bridge_fraction(const LabelMap& label);

struct SynthConfig {
  int train_sequences = 20;
  int test_sequences = 4;
  int frames_per_sequence = 100;
  int height = 48;
  int width = 64;
  std::uint64_t seed = 1;
  WalkParams walk;
  bool operator==(const SynthConfig&) const = default;
};

struct SequenceSeeds {
  std::uint64_t scene = 0;
  std::uint64_t walk = 0;
};

/// Scene and walk seeds for sequence `index` of a split, derived from the
/// config seed.
SequenceSeeds sequence_seeds(std::uint64_t seed, const std::string& split, int index);

struct GenerateSummary {
  std::size_t frames = 0;
  std::vector<std::int64_t> train_histogram;
  std::vector<std::int64_t> test_histogram;
};

/// Writes the dataset layout under `root` (created if missing; its parent
/// must exist). Throws IoError naming the path on any failure.
GenerateSummary generate_dataset(const SynthConfig& config, const std::filesystem::path& root);

/// Reads the generation config back from `<root>/manifest.json`.
SynthConfig read_manifest_config(const std::filesystem::path& manifest);

}  // namespace seqseg
