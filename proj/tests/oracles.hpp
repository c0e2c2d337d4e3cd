#pragma once

// Test-only oracles, kept independent of the library implementations they
// check: an exact LP transport solver (successive shortest paths), a central
// finite-difference gradient checker, and a brute-force peak/point matcher.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "treeformer/data.hpp"
#include "treeformer/grid.hpp"

namespace oracles {

// Exact optimal transport cost between supply a and demand b (equal totals)
// with dense cost matrix, via min-cost flow / successive shortest paths.
inline double lp_transport(const std::vector<double>& a, const std::vector<double>& b,
                           const std::vector<std::vector<double>>& cost) {
  const int n = int(a.size()), m = int(b.size());
  const int src = n + m, dst = n + m + 1, nodes = n + m + 2;
  std::vector<double> supply = a, demand = b;
  std::vector<std::vector<double>> flow(n, std::vector<double>(m, 0.0));
  const double inf = std::numeric_limits<double>::infinity();
  double total_cost = 0.0;

  while (true) {
    double remaining = 0.0;
    for (double x : supply) remaining += x;
    if (remaining <= 1e-12) break;
    // Bellman-Ford over the residual graph
    std::vector<double> dist(nodes, inf);
    std::vector<int> prev(nodes, -1);
    dist[src] = 0.0;
    for (int it = 0; it < nodes; ++it) {
      bool changed = false;
      for (int i = 0; i < n; ++i)
        if (supply[i] > 1e-15 && dist[src] < dist[i]) {
          dist[i] = dist[src];
          prev[i] = src;
          changed = true;
        }
      for (int j = 0; j < m; ++j)
        if (demand[j] > 1e-15 && dist[n + j] + 0.0 < dist[dst]) {
          dist[dst] = dist[n + j];
          prev[dst] = n + j;
          changed = true;
        }
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          if (dist[i] + cost[i][j] < dist[n + j] - 1e-18) {
            dist[n + j] = dist[i] + cost[i][j];
            prev[n + j] = i;
            changed = true;
          }
          if (flow[i][j] > 1e-15 && dist[n + j] - cost[i][j] < dist[i] - 1e-18) {
            dist[i] = dist[n + j] - cost[i][j];
            prev[i] = n + j;
            changed = true;
          }
        }
      if (!changed) break;
    }
    if (prev[dst] < 0) break;  // no augmenting path for the residual dust
    // trace path, find bottleneck
    double push = remaining;
    for (int v = dst; v != src; v = prev[v]) {
      int u = prev[v];
      if (u == src) push = std::min(push, supply[v]);
      else if (v == dst) push = std::min(push, demand[u - n]);
      else if (u < n) push = std::min(push, inf);          // forward arc
      else push = std::min(push, flow[v][u - n]);          // backward arc
    }
    for (int v = dst; v != src; v = prev[v]) {
      int u = prev[v];
      if (u == src) supply[v] -= push;
      else if (v == dst) demand[u - n] -= push;
      else if (u < n) {
        flow[u][v - n] += push;
        total_cost += push * cost[u][v - n];
      } else {
        flow[v][u - n] -= push;
        total_cost -= push * cost[v][u - n];
      }
    }
  }
  return total_cost;
}

// LP transport between two grids with squared pixel-distance cost (matches
// the library's implicit ground cost).
inline double lp_transport_grids(const treeformer::Grid& a, const treeformer::Grid& b) {
  std::vector<double> av(a.v.begin(), a.v.end()), bv(b.v.begin(), b.v.end());
  const int h = a.h, w = a.w;
  std::vector<std::vector<double>> cost(av.size(), std::vector<double>(bv.size()));
  for (int i = 0; i < h * w; ++i)
    for (int j = 0; j < h * w; ++j) {
      double dy = i / w - j / w, dx = i % w - j % w;
      cost[i][j] = dy * dy + dx * dx;
    }
  return lp_transport(av, bv, cost);
}

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> central_fd(const std::function<double(const std::vector<double>&)>& f,
                                      std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double x0 = x[i];
    x[i] = x0 + h;
    double fp = f(x);
    x[i] = x0 - h;
    double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& fd,
                          double floor = 1e-6) {
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    double denom = std::max({std::abs(analytic[i]), std::abs(fd[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

// Maximum-cardinality matching between peaks and points within a radius,
// via augmenting paths. Optimal TP count for localization comparisons.
inline int optimal_match_count(const std::vector<treeformer::data::TreePoint>& peaks,
                               const std::vector<treeformer::data::TreePoint>& points,
                               double radius, double coord_scale = 1.0) {
  const int np = int(peaks.size()), ng = int(points.size());
  std::vector<std::vector<int>> adj(np);
  for (int p = 0; p < np; ++p)
    for (int g = 0; g < ng; ++g) {
      double d = std::hypot(peaks[p].x - points[g].x / coord_scale,
                            peaks[p].y - points[g].y / coord_scale);
      if (d <= radius) adj[p].push_back(g);
    }
  std::vector<int> match_g(ng, -1);
  std::function<bool(int, std::vector<bool>&)> try_kuhn = [&](int p, std::vector<bool>& used) {
    for (int g : adj[p]) {
      if (used[g]) continue;
      used[g] = true;
      if (match_g[g] < 0 || try_kuhn(match_g[g], used)) {
        match_g[g] = p;
        return true;
      }
    }
    return false;
  };
  int count = 0;
  for (int p = 0; p < np; ++p) {
    std::vector<bool> used(ng, false);
    if (try_kuhn(p, used)) ++count;
  }
  return count;
}

}  // namespace oracles
