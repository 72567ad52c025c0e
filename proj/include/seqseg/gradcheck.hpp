#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

namespace seqseg {

struct FiniteDiffOptions {
  double eps = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random subset of this many.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Extra denominator floor, as a fraction of the largest |analytic| entry.
  /// Coordinates far below the tensor's gradient scale sit under the
  /// difference quotient's roundoff; 0 keeps a pure per-coordinate ratio.
  double scale_floor = 0.0;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central-difference check of `analytic` = d loss / d point. `loss` must
/// read `point` live; each coordinate is perturbed in place and restored.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8, floor),
/// floor = scale_floor * max_j |a_j|.
/// Throws NumericError if any numeric derivative is non-finite.
FiniteDiffReport finite_diff_check(const std::function<double()>& loss,
                                   std::span<double> point,
                                   std::span<const double> analytic,
                                   const FiniteDiffOptions& options = {});

/// Directional variant: compares analytic . v with the central difference of
/// loss along v for `directions` unit vectors v. The first is the analytic
/// gradient direction, the rest mix it with an independent Gaussian
/// direction. Suited to deep compositions whose individual coordinates fall
/// below the difference quotient's roundoff. `max_coords` is ignored.
FiniteDiffReport directional_diff_check(const std::function<double()>& loss,
                                        std::span<double> point,
                                        std::span<const double> analytic,
                                        std::size_t directions,
                                        const FiniteDiffOptions& options = {});

}  // namespace seqseg
