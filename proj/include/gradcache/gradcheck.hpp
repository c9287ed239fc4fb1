#pragma once

// Central-difference gradient checking and tensor comparison helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "gradcache/autodiff.hpp"

namespace gradcache {

/// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor).
///
/// `floor` keeps coordinates whose true value is zero (e.g. gradients that
/// cancel by symmetry) from turning rounding noise into O(1) errors.
inline double max_rel_err(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-8) {
  if (a.size() != b.size()) {
    throw ShapeError("max_rel_err: sizes " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = std::abs(a[k] - b[k]);
    if (diff == 0.0) continue;
    const double denom = std::max({std::abs(a[k]), std::abs(b[k]), floor});
    worst = std::max(worst, diff / denom);
  }
  return worst;
}

inline double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_rel_err: shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  return max_rel_err(a.data(), b.data(), floor);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < std::min(a.size(), b.size()); ++k)
    worst = std::max(worst, std::abs(a[k] - b[k]));
  return worst;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
  std::vector<double> analytic;  // full analytic gradient
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  /// Coordinates to probe; 0 means every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error, see max_rel_err.
  double floor = 1e-3;
};

/// Compare the taped gradient of `f` at `point` with central differences.
///
/// `f` maps a tensor to a scalar tensor. It is evaluated once on a tape leaf
/// for the analytic gradient and twice per probed coordinate with recording
/// disabled.
inline GradCheckReport finite_diff_check(
    const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
    const GradCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw ConfigError("finite_diff_check: step must be > 0");
  GradCheckReport report;
  {
    Tape tape;
    const Tensor x = tape.variable(point);
    const Tensor y = f(x);
    if (!y.attached()) {
      // Constant function: no path from x to y.
      report.analytic.assign(point.size(), 0.0);
    } else {
      tape.backward(y);
      report.analytic = tape.grad(x).to_vector();
    }
  }

  std::vector<std::size_t> coords(point.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (opts.max_coords && opts.max_coords < coords.size()) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  NoGraphScope no_graph;
  std::vector<double> probe = point.to_vector();
  for (std::size_t k : coords) {
    const double orig = probe[k];
    probe[k] = orig + opts.step;
    const double up = f(Tensor(point.shape(), probe)).item();
    probe[k] = orig - opts.step;
    const double down = f(Tensor(point.shape(), probe)).item();
    probe[k] = orig;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double a = report.analytic[k];
    const double diff = std::abs(a - numeric);
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
    const double err = diff == 0.0 ? 0.0 : diff / denom;
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_index = k;
    }
    ++report.coords_checked;
  }
  report.passed = report.max_rel_err < opts.tolerance;
  return report;
}

}  // namespace gradcache
