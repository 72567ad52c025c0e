#pragma once

// Brute-force ray casting used to check the renderer: every face of every
// box is intersected as a bounded plane, independently of the slab test in
// the library.

#include <cmath>
#include <limits>
#include <vector>

#include "seqseg/synthworld.hpp"

namespace seqseg::testing {

struct OracleHit {
  double t = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> labels;  // every label hit at (within roundoff of) t
};

/// Pinhole ray rebuilt from the pose, for comparison with camera_ray.
inline Vec3 oracle_direction(const CameraPose& p, int h, int w, int y, int x) {
  const double f = (w / 2.0) / std::tan(p.fov / 2);
  const double sx = x + 0.5 - w / 2.0;  // right
  const double sy = h / 2.0 - (y + 0.5);  // up
  // camera frame: forward (heading, pitch), right is forward rotated -90 deg in plan
  const double ch = std::cos(p.heading), sh = std::sin(p.heading);
  const double cp = std::cos(p.pitch), sp = std::sin(p.pitch);
  const Vec3 fwd{cp * ch, cp * sh, sp};
  const Vec3 right{sh, -ch, 0};
  const Vec3 up{-sp * ch, -sp * sh, cp};
  Vec3 d;
  for (int a = 0; a < 3; ++a) d[a] = f * fwd[a] + sx * right[a] + sy * up[a];
  const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  for (double& v : d) v /= n;
  return d;
}

inline OracleHit oracle_trace(const SceneSpec& scene, const Vec3& o, const Vec3& d) {
  struct Cand {
    double t;
    std::uint8_t label;
  };
  std::vector<Cand> cands;
  for (const Box& b : scene.boxes)
    for (int a = 0; a < 3; ++a)
      for (double plane : {b.lo[a], b.hi[a]}) {
        if (d[a] == 0.0) continue;
        const double t = (plane - o[a]) / d[a];
        if (!(t > 1e-9)) continue;
        bool inside = true;
        for (int k = 0; k < 3 && inside; ++k) {
          if (k == a) continue;
          const double p = o[k] + t * d[k];
          const double tol = 1e-9 * (1.0 + std::abs(p));
          inside = p >= b.lo[k] - tol && p <= b.hi[k] + tol;
        }
        if (inside) cands.push_back({t, b.label});
      }
  if (d[2] < 0.0) cands.push_back({-o[2] / d[2], kNonBridge});
  OracleHit hit;
  for (const Cand& c : cands) hit.t = std::min(hit.t, c.t);
  for (const Cand& c : cands)
    if (c.t <= hit.t * (1 + 1e-9)) hit.labels.push_back(c.label);
  if (hit.labels.empty()) hit.labels.push_back(kNonBridge);  // sky
  return hit;
}

}  // namespace seqseg::testing
