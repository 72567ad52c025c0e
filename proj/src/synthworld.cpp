#include "seqseg/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"
#include "seqseg/errors.hpp"
#include "seqseg/image_io.hpp"
#include "seqseg/parallel.hpp"

namespace seqseg {

namespace fs = std::filesystem;

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
Vec3 normalized(const Vec3& a) { return scale(a, 1.0 / norm3(a)); }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2 * std::numbers::pi;
  while (a < -std::numbers::pi) a += 2 * std::numbers::pi;
  return a;
}

Box make_box(Vec3 lo, Vec3 hi, std::uint8_t label, Material m, Rng& rng, double albedo) {
  Box b;
  b.lo = lo;
  b.hi = hi;
  b.label = label;
  b.material = m;
  b.texture_seed = static_cast<std::uint32_t>(rng());
  b.albedo = albedo;
  return b;
}

// Concrete base brightness; the same draw for every structural element.
double concrete_albedo(Rng& rng) { return uniform(rng, 0.45, 0.72); }

std::uint32_t hash3(std::uint32_t seed, std::int64_t a, std::int64_t b) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ull;
  h ^= static_cast<std::uint64_t>(a) * 0xC2B2AE3D27D4EB4Full;
  h = (h ^ (h >> 29)) * 0xBF58476D1CE4E5B9ull;
  h ^= static_cast<std::uint64_t>(b) * 0x165667B19E3779F9ull;
  h = (h ^ (h >> 32)) * 0x94D049BB133111EBull;
  return static_cast<std::uint32_t>(h >> 32);
}

double lattice(std::uint32_t seed, std::int64_t a, std::int64_t b) {
  return hash3(seed, a, b) / 4294967296.0;
}

// Smoothly interpolated lattice noise in [0, 1).
double value_noise(std::uint32_t seed, double u, double v) {
  const double fu = std::floor(u), fv = std::floor(v);
  const auto iu = static_cast<std::int64_t>(fu), iv = static_cast<std::int64_t>(fv);
  double tu = u - fu, tv = v - fv;
  tu = tu * tu * (3 - 2 * tu);
  tv = tv * tv * (3 - 2 * tv);
  const double a = lattice(seed, iu, iv), b = lattice(seed, iu + 1, iv);
  const double c = lattice(seed, iu, iv + 1), d = lattice(seed, iu + 1, iv + 1);
  return (a * (1 - tu) + b * tu) * (1 - tv) + (c * (1 - tu) + d * tu) * tv;
}

double fractal(std::uint32_t seed, double u, double v) {
  return 0.5 * value_noise(seed, u / 0.8, v / 0.8) +
         0.3 * value_noise(seed ^ 0x5bd1e995u, u / 0.3, v / 0.3) +
         0.2 * value_noise(seed ^ 0x27d4eb2du, u / 0.12, v / 0.12);
}

void face_uv(int axis, const Vec3& p, double& u, double& v) {
  u = p[axis == 0 ? 1 : 0];
  v = p[axis == 2 ? 1 : 2];
}

double face_shade(int axis, int sign) {
  if (axis == 2) return sign > 0 ? 1.0 : 0.74;
  if (axis == 0) return sign > 0 ? 0.86 : 0.70;
  return sign > 0 ? 0.80 : 0.66;
}

bool inside_expanded(const Box& b, const Vec3& p, double margin) {
  for (int a = 0; a < 3; ++a)
    if (p[a] < b.lo[a] - margin || p[a] > b.hi[a] + margin) return false;
  return true;
}

}  // namespace

// ---- scene -------------------------------------------------------------------

SceneSpec build_scene(std::uint64_t seed) {
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  s.column_count = std::uniform_int_distribution<int>(2, 6)(rng);
  const double spacing = uniform(rng, 9.0, 15.0);
  const double length = spacing * (s.column_count + 1);
  const double half_w = uniform(rng, 3.5, 5.5);
  const double clearance = uniform(rng, 5.0, 9.0);
  const double cap_depth = uniform(rng, 0.8, 1.2);
  const double girder_depth = uniform(rng, 0.8, 1.3);
  const double slab = uniform(rng, 0.5, 0.7);
  const double col_w = uniform(rng, 1.0, 1.8);
  const double cap_top = clearance + cap_depth;
  s.deck_bottom = cap_top + girder_depth;
  const double deck_top = s.deck_bottom + slab;

  // Columns first so their indices are stable; each carries a pier cap.
  for (int i = 0; i < s.column_count; ++i) {
    const double xc = spacing * (i + 1) + uniform(rng, -1.0, 1.0);
    s.boxes.push_back(make_box({xc - col_w / 2, -col_w / 2, 0.0},
                               {xc + col_w / 2, col_w / 2, clearance}, kColumns,
                               Material::concrete, rng, concrete_albedo(rng)));
    const double cap_half = col_w / 2 + 0.3;
    s.boxes.push_back(make_box({xc - cap_half, -half_w + 0.4, clearance},
                               {xc + cap_half, half_w - 0.4, cap_top}, kBeamsSlabs,
                               Material::concrete, rng, concrete_albedo(rng)));
  }
  const int girders = half_w > 4.5 ? 4 : 3;
  for (int g = 0; g < girders; ++g) {
    const double yc = -half_w + 1.0 + (2 * half_w - 2.0) * g / (girders - 1);
    s.boxes.push_back(make_box({0.0, yc - 0.3, cap_top}, {length, yc + 0.3, s.deck_bottom},
                               kBeamsSlabs, Material::concrete, rng, concrete_albedo(rng)));
  }
  s.boxes.push_back(make_box({0.0, -half_w, s.deck_bottom}, {length, half_w, deck_top},
                             kBeamsSlabs, Material::concrete, rng, concrete_albedo(rng)));
  for (double side : {-1.0, 1.0}) {
    const double y0 = side * (half_w - 0.15);
    s.boxes.push_back(make_box({0.0, y0 - 0.1, deck_top}, {length, y0 + 0.1, deck_top + 1.0},
                               kOtherNonstructural, Material::metal, rng,
                               uniform(rng, 0.45, 0.6)));
  }

  // Distractors beside the bridge.
  const int trees = std::uniform_int_distribution<int>(3, 8)(rng);
  for (int t = 0; t < trees; ++t) {
    const double x = uniform(rng, -20.0, length + 20.0);
    const double side = rng() % 2 ? 1.0 : -1.0;
    const double y = side * uniform(rng, half_w + 4.0, 30.0);
    const double trunk_h = uniform(rng, 1.5, 4.0);
    const double crown = uniform(rng, 1.5, 3.5);
    s.boxes.push_back(make_box({x - 0.2, y - 0.2, 0.0}, {x + 0.2, y + 0.2, trunk_h},
                               kOtherNonstructural, Material::bark, rng,
                               uniform(rng, 0.3, 0.45)));
    s.boxes.push_back(make_box({x - crown, y - crown, trunk_h},
                               {x + crown, y + crown, trunk_h + 2 * crown * uniform(rng, 0.7, 1.2)},
                               kOtherNonstructural, Material::foliage, rng,
                               uniform(rng, 0.35, 0.55)));
  }
  const int signs = std::uniform_int_distribution<int>(1, 2)(rng);
  for (int k = 0; k < signs; ++k) {
    const double x = uniform(rng, -15.0, length + 15.0);
    const double y = (rng() % 2 ? 1.0 : -1.0) * uniform(rng, half_w + 2.0, 12.0);
    const double pole_h = uniform(rng, 2.0, 3.0);
    s.boxes.push_back(make_box({x - 0.06, y - 0.06, 0.0}, {x + 0.06, y + 0.06, pole_h},
                               kOtherNonstructural, Material::metal, rng, 0.5));
    s.boxes.push_back(make_box({x - 0.05, y - 0.8, pole_h}, {x + 0.05, y + 0.8, pole_h + 1.0},
                               kOtherNonstructural, Material::sign, rng,
                               uniform(rng, 0.6, 0.9)));
  }
  s.ground_seed = static_cast<std::uint32_t>(rng());
  s.world_lo = {-35.0, -40.0, 0.6};
  s.world_hi = {length + 35.0, 40.0, deck_top + 15.0};
  return s;
}

// ---- camera -------------------------------------------------------------------

namespace {

struct Target {
  Vec3 point{};
  Vec3 approach{};  // unit vector from the surface towards the camera
};

Target pick_target(const SceneSpec& scene, Rng& rng) {
  std::vector<int> columns, caps;
  int deck = -1;
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box& b = scene.boxes[i];
    if (b.label == kColumns) columns.push_back(static_cast<int>(i));
    if (b.label == kBeamsSlabs && b.lo[2] >= scene.deck_bottom - 1e-9) deck = static_cast<int>(i);
    if (b.label == kBeamsSlabs && b.hi[0] - b.lo[0] < 4.0) caps.push_back(static_cast<int>(i));
  }
  Target t;
  const double choice = uniform(rng, 0.0, 1.0);
  const double yaw = uniform(rng, -0.7, 0.7);
  if (choice < 0.45) {
    const Box& c = scene.boxes[columns[rng() % columns.size()]];
    const int face = static_cast<int>(rng() % 4);
    const int axis = face / 2;
    const double sign = face % 2 ? 1.0 : -1.0;
    Vec3 p{(c.lo[0] + c.hi[0]) / 2, (c.lo[1] + c.hi[1]) / 2,
           uniform(rng, 1.5, c.hi[2] - 1.0)};
    p[axis] = sign > 0 ? c.hi[axis] : c.lo[axis];
    Vec3 n{0, 0, 0};
    n[axis] = sign;
    const double base = std::atan2(n[1], n[0]) + yaw;
    t.point = p;
    t.approach = {std::cos(base), std::sin(base), uniform(rng, -0.05, 0.25)};
  } else if (choice < 0.85 && deck >= 0) {
    const Box& d = scene.boxes[deck];
    t.point = {uniform(rng, d.lo[0] + 2.0, d.hi[0] - 2.0), uniform(rng, d.lo[1], d.hi[1]),
               d.lo[2]};
    const double elev = uniform(rng, 0.5, 1.2);
    const double heading = uniform(rng, -std::numbers::pi, std::numbers::pi);
    t.approach = {std::cos(heading) * std::cos(elev), std::sin(heading) * std::cos(elev),
                  -std::sin(elev)};
  } else {
    const Box& c = scene.boxes[caps.empty() ? deck : caps[rng() % caps.size()]];
    const double sign = rng() % 2 ? 1.0 : -1.0;
    t.point = {sign > 0 ? c.hi[0] : c.lo[0], uniform(rng, c.lo[1] + 0.5, c.hi[1] - 0.5),
               (c.lo[2] + c.hi[2]) / 2};
    const double base = (sign > 0 ? 0.0 : std::numbers::pi) + yaw;
    t.approach = {std::cos(base), std::sin(base), uniform(rng, -0.3, 0.1)};
  }
  t.approach = normalized(t.approach);
  return t;
}

void keep_in_world(const SceneSpec& scene, Vec3& p) {
  for (int a = 0; a < 3; ++a) {
    const double lo = scene.world_lo[a], hi = scene.world_hi[a];
    if (p[a] < lo) p[a] = std::min(hi, 2 * lo - p[a]);
    if (p[a] > hi) p[a] = std::max(lo, 2 * hi - p[a]);
  }
  // Keep clear of every box by a small margin.
  const double margin = 0.3;
  for (const Box& b : scene.boxes) {
    if (!inside_expanded(b, p, margin)) continue;
    int best_axis = 0;
    double best_move = 1e300, best_to = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double to_lo = b.lo[a] - margin, to_hi = b.hi[a] + margin;
      if (a == 2 && to_lo < scene.world_lo[2]) {
        // can't go below the floor: only consider the top side
      } else if (std::abs(p[a] - to_lo) < best_move) {
        best_move = std::abs(p[a] - to_lo);
        best_axis = a;
        best_to = to_lo;
      }
      if (std::abs(to_hi - p[a]) < best_move) {
        best_move = std::abs(to_hi - p[a]);
        best_axis = a;
        best_to = to_hi;
      }
    }
    p[best_axis] = best_to;
  }
}

}  // namespace

std::vector<CameraPose> random_walk_camera(const SceneSpec& scene, std::uint64_t seed,
                                           int length, const WalkParams& wp) {
  if (length < 1) throw ConfigError("walk length must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Target target = pick_target(scene, rng);
  double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
  const double step = 2 * std::numbers::pi / wp.cycle_frames;
  auto standoff = [&](double ph) {
    const double c = 0.5 + 0.5 * std::cos(ph);  // 1 far, 0 near
    return wp.near_distance + (wp.far_distance - wp.near_distance) * c * c * c;
  };
  Vec3 pos = add(target.point, scale(target.approach, standoff(phase)));
  keep_in_world(scene, pos);
  auto aim = [&](const Vec3& from, double& heading, double& pitch) {
    const Vec3 d = sub(target.point, from);
    heading = std::atan2(d[1], d[0]);
    pitch = std::atan2(d[2], std::hypot(d[0], d[1]));
  };
  double heading = 0.0, pitch = 0.0;
  aim(pos, heading, pitch);

  std::vector<CameraPose> poses;
  for (int t = 0; t < length; ++t) {
    bool jump = false;
    if (t > 0) {
      const double prev_phase = phase;
      phase += step;
      // Pick a new target each time the walk passes its farthest point.
      if (std::floor((prev_phase - std::numbers::pi) / (2 * std::numbers::pi)) !=
          std::floor((phase - std::numbers::pi) / (2 * std::numbers::pi)))
        target = pick_target(scene, rng);
      const Vec3 desired = add(target.point, scale(target.approach, standoff(phase)));
      for (int a = 0; a < 3; ++a)
        pos[a] += 0.15 * (desired[a] - pos[a]) + wp.position_noise * gauss(rng);
      double want_h, want_p;
      aim(pos, want_h, want_p);
      heading = wrap_angle(heading + 0.35 * wrap_angle(want_h - heading) +
                           wp.angle_noise * gauss(rng));
      pitch += 0.35 * (want_p - pitch) + wp.angle_noise * gauss(rng);
      if (uniform(rng, 0.0, 1.0) < wp.p_jump) {
        jump = true;
        heading = wrap_angle(heading + uniform(rng, -1.2, 1.2));
        pitch = uniform(rng, -0.4, 0.6);
        pos[2] = uniform(rng, scene.world_lo[2], scene.world_hi[2]);
        if (uniform(rng, 0.0, 1.0) < 0.5) target = pick_target(scene, rng);
      }
      keep_in_world(scene, pos);
    }
    pitch = std::clamp(pitch, -1.4, 1.4);
    CameraPose pose;
    pose.position = pos;
    pose.heading = heading;
    pose.pitch = pitch;
    pose.jump = jump;
    poses.push_back(pose);
  }
  return poses;
}

Ray camera_ray(const CameraPose& pose, int h, int w, int y, int x) {
  const double ch = std::cos(pose.heading), sh = std::sin(pose.heading);
  const double cp = std::cos(pose.pitch), sp = std::sin(pose.pitch);
  const Vec3 forward{cp * ch, cp * sh, sp};
  const Vec3 right{sh, -ch, 0.0};
  const Vec3 up = cross(right, forward);
  const double half = std::tan(pose.fov / 2);
  const double u = (x + 0.5 - w / 2.0) / (w / 2.0) * half;
  const double v = (h / 2.0 - y - 0.5) / (w / 2.0) * half;
  Ray r;
  r.origin = pose.position;
  r.dir = normalized(add(forward, add(scale(right, u), scale(up, v))));
  return r;
}

// ---- tracing and shading ----------------------------------------------------------

Hit trace(const SceneSpec& scene, const Ray& ray) {
  Hit best;
  best.box = -2;
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    const Box& b = scene.boxes[i];
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    int axis = 0, sign = 1;
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      const double o = ray.origin[a], d = ray.dir[a];
      if (d == 0.0) {
        if (o < b.lo[a] || o > b.hi[a]) miss = true;
        continue;
      }
      double t0 = (b.lo[a] - o) / d, t1 = (b.hi[a] - o) / d;
      int s = -1;  // entering through the lo face
      if (t0 > t1) {
        std::swap(t0, t1);
        s = 1;
      }
      if (t0 > t_enter) {
        t_enter = t0;
        axis = a;
        sign = s;
      }
      t_exit = std::min(t_exit, t1);
    }
    if (miss || t_enter > t_exit || t_enter <= 1e-9 || t_enter >= best.t) continue;
    best.t = t_enter;
    best.box = static_cast<int>(i);
    best.axis = axis;
    best.sign = sign;
    best.label = b.label;
  }
  if (ray.dir[2] < 0.0) {
    const double t = -ray.origin[2] / ray.dir[2];
    if (t > 1e-9 && t < best.t) {
      best.t = t;
      best.box = -1;
      best.axis = 2;
      best.sign = 1;
      best.label = kNonBridge;
    }
  }
  if (best.box != -2) best.point = add(ray.origin, scale(ray.dir, best.t));
  return best;
}

double concrete_texture(const Box& box, int axis, const Vec3& point) {
  double u, v;
  face_uv(axis, point, u, v);
  const double n = fractal(box.texture_seed + 977u * static_cast<std::uint32_t>(axis), u, v);
  return box.albedo * (0.7 + 0.6 * n);
}

namespace {

Vec3 surface_color(const SceneSpec& scene, const Hit& hit, const Ray& ray) {
  if (hit.box == -2) {
    const double k = std::clamp(ray.dir[2], 0.0, 1.0);
    return {0.78 - 0.4 * k, 0.84 - 0.28 * k, 0.92 - 0.05 * k};
  }
  Vec3 c;
  if (hit.box == -1) {
    const double n = fractal(scene.ground_seed, hit.point[0] / 2.5, hit.point[1] / 2.5);
    const double m = value_noise(scene.ground_seed ^ 0x1234567u, hit.point[0] / 15.0,
                                 hit.point[1] / 15.0);
    c = {0.30 + 0.20 * m + 0.1 * n, 0.42 + 0.1 * n, 0.20 + 0.06 * m};
  } else {
    const Box& b = scene.boxes[hit.box];
    double u, v;
    face_uv(hit.axis, hit.point, u, v);
    const double n = fractal(b.texture_seed + 977u * static_cast<std::uint32_t>(hit.axis), u, v);
    switch (b.material) {
      case Material::concrete: {
        const double a = concrete_texture(b, hit.axis, hit.point);
        c = {a, a * 0.97, a * 0.92};
        break;
      }
      case Material::foliage:
        c = {b.albedo * (0.35 + 0.4 * n), b.albedo * (0.7 + 0.6 * n), b.albedo * 0.3};
        break;
      case Material::bark:
        c = {b.albedo * (0.9 + 0.3 * n), b.albedo * (0.65 + 0.2 * n), b.albedo * 0.4};
        break;
      case Material::sign:
        c = hit.axis == 0 ? Vec3{b.albedo, 0.2 * b.albedo, 0.15 * b.albedo}
                          : Vec3{0.55, 0.55, 0.55};
        break;
      case Material::metal:
        c = {b.albedo * 0.8, b.albedo * 0.88, b.albedo * (0.95 + 0.1 * n)};
        break;
    }
    const double shade = face_shade(hit.axis, hit.sign);
    c = scale(c, shade);
  }
  const double fog = 1.0 - std::exp(-hit.t / 140.0);
  const Vec3 haze{0.78, 0.82, 0.88};
  return add(scale(c, 1.0 - fog), scale(haze, fog));
}

}  // namespace

RenderOutput render(const SceneSpec& scene, const CameraPose& pose, int h, int w) {
  if (h < 1 || w < 1) throw ConfigError("render size must be positive");
  RenderOutput out;
  out.rgb = Tensor4(Shape4{1, 3, h, w});
  out.label = LabelMap(h, w);
  out.depth.assign(static_cast<std::size_t>(h) * w, std::numeric_limits<double>::infinity());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Ray ray = camera_ray(pose, h, w, y, x);
      const Hit hit = trace(scene, ray);
      const Vec3 c = surface_color(scene, hit, ray);
      for (int k = 0; k < 3; ++k) out.rgb(0, k, y, x) = std::clamp(c[k], 0.0, 1.0);
      out.label.at(y, x) = hit.label;
      if (hit.box != -2) out.depth[static_cast<std::size_t>(y) * w + x] = hit.t;
    }
  return out;
}

double bridge_fraction(const LabelMap& label) {
  if (label.ids.empty()) return 0.0;
  std::size_t n = 0;
  for (std::uint8_t id : label.ids)
    if (id >= kColumns && id <= kOtherNonstructural) ++n;
  return static_cast<double>(n) / static_cast<double>(label.ids.size());
}

// ---- dataset ----------------------------------------------------------------------

SequenceSeeds sequence_seeds(std::uint64_t seed, const std::string& split, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    split == "train" ? 11u : 23u, static_cast<std::uint32_t>(index)};
  std::uint32_t w[4];
  seq.generate(w, w + 4);
  return {static_cast<std::uint64_t>(w[0]) << 32 | w[1],
          static_cast<std::uint64_t>(w[2]) << 32 | w[3]};
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

std::string frame_name(const char* prefix, int i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", prefix, i, ext);
  return buf;
}

nlohmann::json walk_json(const WalkParams& w) {
  return {{"p_jump", w.p_jump},
          {"cycle_frames", w.cycle_frames},
          {"near_distance", w.near_distance},
          {"far_distance", w.far_distance},
          {"position_noise", w.position_noise},
          {"angle_noise", w.angle_noise}};
}

std::vector<std::int64_t> write_sequence(const SynthConfig& cfg, const std::string& split,
                                         int index, const fs::path& dir) {
  const SequenceSeeds seeds = sequence_seeds(cfg.seed, split, index);
  const SceneSpec scene = build_scene(seeds.scene);
  const auto poses = random_walk_camera(scene, seeds.walk, cfg.frames_per_sequence, cfg.walk);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::int64_t> hist(kNumBridgeClasses, 0);
  nlohmann::json pose_list = nlohmann::json::array();
  for (int i = 0; i < cfg.frames_per_sequence; ++i) {
    const CameraPose& p = poses[i];
    const RenderOutput r = render(scene, p, cfg.height, cfg.width);
    write_ppm(dir / frame_name("frame", i, "ppm"), r.rgb);
    write_pgm(dir / frame_name("label", i, "pgm"), GrayImage8{cfg.height, cfg.width, r.label.ids});
    GrayImage16 depth{cfg.height, cfg.width, {}};
    depth.pixels.reserve(r.depth.size());
    for (double d : r.depth) {
      if (!std::isfinite(d)) {
        depth.pixels.push_back(0);
        continue;
      }
      const double mm = std::round(d * 1000.0);
      depth.pixels.push_back(static_cast<std::uint16_t>(std::clamp(mm, 1.0, 65535.0)));
    }
    write_pgm(dir / frame_name("depth", i, "pgm"), depth);
    for (std::uint8_t id : r.label.ids)
      if (id < kNumBridgeClasses) ++hist[id];
    pose_list.push_back({{"position", p.position},
                         {"heading", p.heading},
                         {"pitch", p.pitch},
                         {"fov", p.fov},
                         {"jump", p.jump}});
  }
  const nlohmann::json meta = {{"split", split},
                               {"index", index},
                               {"scene_seed", seeds.scene},
                               {"walk_seed", seeds.walk},
                               {"height", cfg.height},
                               {"width", cfg.width},
                               {"frames", cfg.frames_per_sequence},
                               {"column_count", scene.column_count},
                               {"poses", pose_list}};
  write_text(dir / "meta.json", meta.dump(1) + "\n");
  return hist;
}

}  // namespace

GenerateSummary generate_dataset(const SynthConfig& cfg, const fs::path& root) {
  if (cfg.train_sequences < 0 || cfg.test_sequences < 0 || cfg.frames_per_sequence < 1 ||
      cfg.height < 1 || cfg.width < 1)
    throw ConfigError("dataset counts and resolution must be positive");
  if (!(cfg.walk.p_jump >= 0.0 && cfg.walk.p_jump <= 1.0) || cfg.walk.cycle_frames <= 0.0 ||
      cfg.walk.near_distance <= 0.0 || cfg.walk.far_distance < cfg.walk.near_distance)
    throw ConfigError("invalid camera walk parameters");
  const fs::path parent = root.has_parent_path() ? root.parent_path() : fs::path(".");
  if (!fs::is_directory(parent))
    throw IoError("output parent directory does not exist: " + parent.string());
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root))
    throw IoError("cannot create " + root.string() + (ec ? ": " + ec.message() : ""));

  struct Job {
    std::string split;
    int index;
  };
  std::vector<Job> jobs;
  for (int i = 0; i < cfg.train_sequences; ++i) jobs.push_back({"train", i});
  for (int i = 0; i < cfg.test_sequences; ++i) jobs.push_back({"test", i});
  std::vector<std::vector<std::int64_t>> hists(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t j) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%05d", jobs[j].index);
    hists[j] = write_sequence(cfg, jobs[j].split, jobs[j].index, root / jobs[j].split / name);
  });

  GenerateSummary sum;
  sum.train_histogram.assign(kNumBridgeClasses, 0);
  sum.test_histogram.assign(kNumBridgeClasses, 0);
  nlohmann::json seqs = nlohmann::json::array();
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    auto& h = jobs[j].split == "train" ? sum.train_histogram : sum.test_histogram;
    for (int k = 0; k < kNumBridgeClasses; ++k) h[k] += hists[j][k];
    const SequenceSeeds s = sequence_seeds(cfg.seed, jobs[j].split, jobs[j].index);
    seqs.push_back({{"split", jobs[j].split},
                    {"index", jobs[j].index},
                    {"scene_seed", s.scene},
                    {"walk_seed", s.walk}});
  }
  sum.frames = jobs.size() * static_cast<std::size_t>(cfg.frames_per_sequence);
  std::vector<std::string> names;
  for (int k = 0; k < kNumBridgeClasses; ++k) names.push_back(class_name(k));
  const nlohmann::json manifest = {
      {"format", "seqseg-synthworld-1"},
      {"seed", cfg.seed},
      {"num_classes", kNumBridgeClasses},
      {"class_names", names},
      {"train_sequences", cfg.train_sequences},
      {"test_sequences", cfg.test_sequences},
      {"frames_per_sequence", cfg.frames_per_sequence},
      {"height", cfg.height},
      {"width", cfg.width},
      {"walk", walk_json(cfg.walk)},
      {"histogram", {{"train", sum.train_histogram}, {"test", sum.test_histogram}}},
      {"sequences", seqs}};
  write_text(root / "manifest.json", manifest.dump(1) + "\n");
  return sum;
}

SynthConfig read_manifest_config(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    SynthConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.train_sequences = j.at("train_sequences").get<int>();
    c.test_sequences = j.at("test_sequences").get<int>();
    c.frames_per_sequence = j.at("frames_per_sequence").get<int>();
    c.height = j.at("height").get<int>();
    c.width = j.at("width").get<int>();
    const auto& w = j.at("walk");
    c.walk.p_jump = w.at("p_jump").get<double>();
    c.walk.cycle_frames = w.at("cycle_frames").get<double>();
    c.walk.near_distance = w.at("near_distance").get<double>();
    c.walk.far_distance = w.at("far_distance").get<double>();
    c.walk.position_noise = w.at("position_noise").get<double>();
    c.walk.angle_noise = w.at("angle_noise").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + manifest.string() + ": " + e.what());
  }
}

}  // namespace seqseg
