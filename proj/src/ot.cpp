#include "treeformer/ot.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace treeformer::ot {

namespace {

using Mat = Eigen::ArrayXXd;
using Vec = Eigen::ArrayXd;

// dist2(i,j) = (i-j)^2 / reg for one axis
Mat axis_cost(int n, double reg) {
  Mat c(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) c(i, j) = double(i - j) * double(i - j) / reg;
  return c;
}

// out(i, col) = logsumexp_j( in(j, col) - cost(i, j) ) for every column.
void lse_apply(const Mat& cost, const Mat& in, Mat& out, Mat& scratch) {
  const int n = int(cost.rows());
  for (int col = 0; col < in.cols(); ++col) {
    // scratch(i,j) = in(j,col) - cost(i,j)
    scratch = (-cost).rowwise() + in.col(col).transpose();
    Vec m = scratch.rowwise().maxCoeff();
    out.col(col) = m + ((scratch.colwise() - m).exp().rowwise().sum()).log();
  }
}

}  // namespace

SinkhornResult sinkhorn_grid(const Grid& a, const Grid& b, const SinkhornOptions& opts) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("sinkhorn: grid shape mismatch");
  const int h = a.h, w = a.w;
  const double reg = opts.reg;
  if (reg <= 0) throw std::invalid_argument("sinkhorn: reg must be positive");

  Eigen::Map<const Mat> A(a.v.data(), w, h);  // column-major map: A(x, y)
  Eigen::Map<const Mat> B(b.v.data(), w, h);
  for (double x : a.v)
    if (x <= 0) throw std::invalid_argument("sinkhorn: marginals must be strictly positive");
  for (double x : b.v)
    if (x <= 0) throw std::invalid_argument("sinkhorn: marginals must be strictly positive");

  // Work in phi = f/reg, psi = g/reg. Grids are indexed (y, x); the cost
  // separates into row and column parts, so each logsumexp over the source
  // grid is two 1-D sweeps.
  const Mat cy = axis_cost(h, reg);
  const Mat cx = axis_cost(w, reg);
  const Mat log_a = A.log();
  const Mat log_b = B.log();

  Mat phi = Mat::Zero(w, h), psi = Mat::Zero(w, h);
  Mat t1(h, w), t1t(w, h), s(w, h);
  Mat scr_y(h, h), scr_x(w, w);

  // sweep(p) -> s where s(x,y) = lse over (jy,jx) of [p(jx,jy) - cy(y,jy) - cx(x,jx)]
  auto sweep = [&](const Mat& p) {
    // stage 1 over rows (y axis): t1(iy, jx) = lse_jy( p(jx, jy) - cy(iy, jy) )
    lse_apply(cy, p.transpose(), t1, scr_y);
    t1t = t1.transpose();  // (jx, iy)
    // stage 2 over cols (x axis): s(ix, iy) = lse_jx( t1t(jx, iy) - cx(ix, jx) )
    lse_apply(cx, t1t, s, scr_x);
  };

  SinkhornResult res;
  res.f = Grid(h, w);
  res.g = Grid(h, w);
  double err = 0.0;
  int it = 0;
  bool done = false;
  while (it < opts.max_iters && !done) {
    ++it;
    sweep(psi);
    // row-marginal error of the plan under the current (phi, psi)
    err = ((phi + s).exp() - A).abs().sum();
    phi = log_a - s;
    sweep(phi);
    psi = log_b - s;
    if (err < opts.tol) done = true;
  }
  res.iters = it;
  res.marginal_err = err;
  res.converged = done;

  // value = <f,a> + <g,b> - reg * sum(P); after the psi update the column
  // marginals are exact, so sum(P) = 1 up to rounding. Compute it anyway for
  // consistency of the reported value with the current duals.
  sweep(psi);
  double plan_mass = (phi + s).exp().sum();
  res.value = reg * ((phi * A).sum() + (psi * B).sum() - plan_mass);

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      res.f.at(y, x) = reg * phi(x, y);
      res.g.at(y, x) = reg * psi(x, y);
    }

  if (opts.want_primal_cost) {
    // dense pass; only sensible for small grids
    double cost = 0.0;
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix)
        for (int jy = 0; jy < h; ++jy)
          for (int jx = 0; jx < w; ++jx) {
            double c = double(iy - jy) * (iy - jy) + double(ix - jx) * (ix - jx);
            double logp = phi(ix, iy) + psi(jx, jy) - c / reg;
            cost += std::exp(logp) * c;
          }
    res.primal_cost = cost;
  }
  return res;
}

}  // namespace treeformer::ot
