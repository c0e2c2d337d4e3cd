#pragma once

#include "treeformer/grid.hpp"

namespace treeformer::ot {

struct SinkhornOptions {
  double reg = 10.0;      // entropic regularization strength
  int max_iters = 100;    // alternating-scaling iteration cap
  double tol = 1e-7;      // L1 marginal violation for early stop
  bool want_primal_cost = false;  // materialize <P,C>; O(n^2), test/report use
};

struct SinkhornResult {
  double value = 0.0;        // entropic objective <f,a>+<g,b>-reg*sum(P)
  double primal_cost = 0.0;  // <P,C> when requested
  Grid f;                    // dual potential over a's bins; d(value)/da = f
  Grid g;                    // dual potential over b's bins
  int iters = 0;
  double marginal_err = 0.0;
  bool converged = false;
};

// Entropic optimal transport between two distributions living on the same
// h x w pixel grid with squared-Euclidean ground cost between pixel centers
// (unit spacing). Solved by alternating scaling in the log domain; the
// separable structure of the cost keeps each iteration at O(h*w*(h+w)).
// Both marginals must be strictly positive and sum to 1.
SinkhornResult sinkhorn_grid(const Grid& a, const Grid& b, const SinkhornOptions& opts);

}  // namespace treeformer::ot
