#include "seqseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "seqseg/errors.hpp"

namespace seqseg {

FiniteDiffReport finite_diff_check(const std::function<double()>& loss,
                                   std::span<double> point,
                                   std::span<const double> analytic,
                                   const FiniteDiffOptions& options) {
  SEQSEG_REQUIRE(point.size() == analytic.size(),
                 "finite_diff_check: point/gradient size mismatch");
  if (options.eps < 1e-6 || options.eps > 1e-4)
    throw ConfigError("finite_diff_check: eps must lie in [1e-6, 1e-4]");

  std::vector<std::size_t> coords(point.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (options.max_coords > 0 && coords.size() > options.max_coords) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  double floor = 1e-8;
  if (options.scale_floor > 0.0) {
    double peak = 0.0;
    for (double a : analytic) peak = std::max(peak, std::abs(a));
    floor = std::max(floor, options.scale_floor * peak);
  }

  FiniteDiffReport report;
  for (std::size_t idx : coords) {
    const double saved = point[idx];
    point[idx] = saved + options.eps;
    const double up = loss();
    point[idx] = saved - options.eps;
    const double down = loss();
    point[idx] = saved;
    const double numeric = (up - down) / (2.0 * options.eps);
    if (!std::isfinite(numeric))
      throw NumericError("finite_diff_check: non-finite numeric derivative at " +
                         std::to_string(idx));
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = idx;
    }
    ++report.checked;
  }
  return report;
}

FiniteDiffReport directional_diff_check(const std::function<double()>& loss,
                                        std::span<double> point,
                                        std::span<const double> analytic,
                                        std::size_t directions,
                                        const FiniteDiffOptions& options) {
  SEQSEG_REQUIRE(point.size() == analytic.size(),
                 "directional_diff_check: point/gradient size mismatch");
  if (options.eps < 1e-6 || options.eps > 1e-4)
    throw ConfigError("directional_diff_check: eps must lie in [1e-6, 1e-4]");
  const std::size_t n = point.size();
  auto unit = [](std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& x : v) x /= norm;
    return norm > 0.0;
  };

  std::vector<double> g(analytic.begin(), analytic.end());
  const bool has_grad = unit(g);
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal;
  const std::vector<double> saved(point.begin(), point.end());

  FiniteDiffReport report;
  for (std::size_t d = 0; d < directions; ++d) {
    std::vector<double> v(n);
    for (double& x : v) x = normal(rng);
    unit(v);
    if (has_grad) {
      const double mix = d == 0 ? 0.0 : 1.0;
      for (std::size_t i = 0; i < n; ++i) v[i] = g[i] + mix * v[i];
      unit(v);
    }
    auto at = [&](double step) {
      for (std::size_t i = 0; i < n; ++i) point[i] = saved[i] + step * v[i];
      return loss();
    };
    const double up = at(options.eps);
    const double down = at(-options.eps);
    std::copy(saved.begin(), saved.end(), point.begin());
    const double numeric = (up - down) / (2.0 * options.eps);
    if (!std::isfinite(numeric))
      throw NumericError("directional_diff_check: non-finite numeric derivative");
    double a = 0.0;
    for (std::size_t i = 0; i < n; ++i) a += analytic[i] * v[i];
    const double rel =
        std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = d;
    }
    ++report.checked;
  }
  return report;
}

}  // namespace seqseg
