#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mtl {

// A point in objective space, lower is better in every coordinate.
struct ParetoPoint {
  std::vector<double> objectives;
  std::string run_id;
};

// a is no worse than b everywhere and strictly better somewhere.
bool dominates(const ParetoPoint& a, const ParetoPoint& b);

// Non-dominated subset, sorted ascending by the first objective (ties by the
// remaining objectives, then run_id). Exact duplicates of a frontier point
// are all retained.
struct Frontier {
  std::vector<ParetoPoint> points;
};

Frontier pareto_filter(const std::vector<ParetoPoint>& points);

// Area dominated by a 2-D frontier relative to `ref` (staircase sum). Points
// not coordinatewise <= ref are clipped out with a warning on stderr; an
// empty effective frontier yields 0 with a warning.
double hypervolume_2d(const Frontier& frontier, const std::array<double, 2>& ref);

// One violating (left hull neighbor, point, right hull neighbor) triple, as
// indices into the sorted frontier.
struct ConvexityReport {
  bool convex = true;
  std::vector<std::array<std::size_t, 3>> violations;
};

// Checks a 2-D frontier against its own lower-left convex hull: every point
// must lie within `tol` vertical distance of the hull chord spanning it.
// Fewer than 3 points is trivially convex.
ConvexityReport convexity_check(const Frontier& frontier, double tol);

// Losses of the interpolated predictor f = lambda*Y1 + (1-lambda)*Y2 for each
// lambda, as sum-of-squares distances (L1, L2) to the two label vectors. On
// this family sqrt(L1) + sqrt(L2) == ||Y1 - Y2|| identically.
std::vector<std::array<double, 2>> interpolation_frontier(std::span<const double> y1,
                                                          std::span<const double> y2,
                                                          std::span<const double> lambdas);

}  // namespace mtl
