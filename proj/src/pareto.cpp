#include "mtl/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <string>

#include "mtl/errors.hpp"

namespace mtl {

namespace {

bool lex_less(const ParetoPoint& a, const ParetoPoint& b) {
  if (a.objectives != b.objectives) return a.objectives < b.objectives;
  return a.run_id < b.run_id;
}

// All-pairs fallback for T != 2.
Frontier filter_all_pairs(std::vector<ParetoPoint> sorted) {
  Frontier out;
  for (const ParetoPoint& p : sorted) {
    bool dominated = false;
    for (const ParetoPoint& q : sorted) {
      if (dominates(q, p)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) out.points.push_back(p);
  }
  return out;
}

}  // namespace

bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  if (a.objectives.size() != b.objectives.size()) {
    throw DimensionError("dominance compares " + std::to_string(a.objectives.size()) +
                         " objectives against " + std::to_string(b.objectives.size()));
  }
  bool strict = false;
  for (std::size_t i = 0; i < a.objectives.size(); ++i) {
    if (a.objectives[i] > b.objectives[i]) return false;
    if (a.objectives[i] < b.objectives[i]) strict = true;
  }
  return strict;
}

Frontier pareto_filter(const std::vector<ParetoPoint>& points) {
  if (points.empty()) throw ConfigError("pareto_filter needs at least one point");
  const std::size_t t = points.front().objectives.size();
  for (const ParetoPoint& p : points) {
    if (p.objectives.size() != t) {
      throw DimensionError("mixed objective counts in pareto_filter input");
    }
  }
  std::vector<ParetoPoint> sorted = points;
  std::sort(sorted.begin(), sorted.end(), lex_less);
  if (t != 2) return filter_all_pairs(std::move(sorted));

  // 2-D sweep: after the lexicographic sort, a point is dominated exactly
  // when some strictly-earlier point has second objective <= its own.
  Frontier out;
  double min2 = std::numeric_limits<double>::infinity();
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].objectives == sorted[i].objectives) ++j;
    if (sorted[i].objectives[1] < min2) {
      for (std::size_t k = i; k < j; ++k) out.points.push_back(sorted[k]);
      min2 = sorted[i].objectives[1];
    }
    i = j;
  }
  return out;
}

double hypervolume_2d(const Frontier& frontier, const std::array<double, 2>& ref) {
  std::vector<ParetoPoint> kept;
  for (const ParetoPoint& p : frontier.points) {
    if (p.objectives.size() != 2) {
      throw DimensionError("hypervolume_2d expects 2 objectives, got " +
                           std::to_string(p.objectives.size()));
    }
    if (p.objectives[0] <= ref[0] && p.objectives[1] <= ref[1]) {
      kept.push_back(p);
    } else {
      std::cerr << "hypervolume_2d: clipping point (" << p.objectives[0] << ", "
                << p.objectives[1] << ") beyond ref (" << ref[0] << ", " << ref[1] << ")\n";
    }
  }
  if (kept.empty()) {
    std::cerr << "hypervolume_2d: empty effective frontier, area 0\n";
    return 0.0;
  }
  // Re-filter defensively so the staircase walks a clean non-dominated chain.
  Frontier clean = pareto_filter(kept);
  double area = 0.0;
  for (std::size_t i = 0; i < clean.points.size(); ++i) {
    const auto& o = clean.points[i].objectives;
    if (i > 0 && o == clean.points[i - 1].objectives) continue;  // co-retained duplicate
    double next_x = ref[0];
    for (std::size_t j = i + 1; j < clean.points.size(); ++j) {
      if (clean.points[j].objectives[0] > o[0]) {
        next_x = clean.points[j].objectives[0];
        break;
      }
    }
    area += (next_x - o[0]) * (ref[1] - o[1]);
  }
  return area;
}

ConvexityReport convexity_check(const Frontier& frontier, double tol) {
  for (const ParetoPoint& p : frontier.points) {
    if (p.objectives.size() != 2) {
      throw DimensionError("convexity_check expects 2 objectives, got " +
                           std::to_string(p.objectives.size()));
    }
  }
  ConvexityReport report;
  if (frontier.points.size() < 3) return report;

  std::vector<ParetoPoint> pts = frontier.points;
  std::sort(pts.begin(), pts.end(), lex_less);

  // Lower-left convex hull by monotone chain over distinct x positions.
  std::vector<std::size_t> hull;
  auto cross = [&pts](std::size_t a, std::size_t b, std::size_t c) {
    const double abx = pts[b].objectives[0] - pts[a].objectives[0];
    const double aby = pts[b].objectives[1] - pts[a].objectives[1];
    const double acx = pts[c].objectives[0] - pts[a].objectives[0];
    const double acy = pts[c].objectives[1] - pts[a].objectives[1];
    return abx * acy - aby * acx;
  };
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!hull.empty() && pts[hull.back()].objectives[0] == pts[i].objectives[0]) continue;
    while (hull.size() >= 2 && cross(hull[hull.size() - 2], hull.back(), i) <= 0.0) {
      hull.pop_back();
    }
    hull.push_back(i);
  }

  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double x = pts[i].objectives[0];
    const double y = pts[i].objectives[1];
    // Hull segment spanning x.
    for (std::size_t s = 0; s + 1 < hull.size(); ++s) {
      const auto& a = pts[hull[s]].objectives;
      const auto& b = pts[hull[s + 1]].objectives;
      if (x < a[0] || x > b[0] || a[0] == b[0]) continue;
      const double chord = a[1] + (b[1] - a[1]) * (x - a[0]) / (b[0] - a[0]);
      if (y - chord > tol) report.violations.push_back({hull[s], i, hull[s + 1]});
      break;
    }
  }
  report.convex = report.violations.empty();
  return report;
}

std::vector<std::array<double, 2>> interpolation_frontier(std::span<const double> y1,
                                                          std::span<const double> y2,
                                                          std::span<const double> lambdas) {
  if (y1.size() != y2.size()) {
    throw DimensionError("interpolation_frontier labels differ in length: " +
                         std::to_string(y1.size()) + " vs " + std::to_string(y2.size()));
  }
  std::vector<std::array<double, 2>> out;
  out.reserve(lambdas.size());
  for (double lambda : lambdas) {
    if (lambda < 0.0 || lambda > 1.0) {
      throw ConfigError("interpolation lambda must lie in [0,1], got " +
                        std::to_string(lambda));
    }
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < y1.size(); ++i) {
      const double f = lambda * y1[i] + (1.0 - lambda) * y2[i];
      l1 += (y1[i] - f) * (y1[i] - f);
      l2 += (y2[i] - f) * (y2[i] - f);
    }
    out.push_back({l1, l2});
  }
  return out;
}

}  // namespace mtl
