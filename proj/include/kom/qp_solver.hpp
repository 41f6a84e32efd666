#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kom/error.hpp"
#include "kom/linalg.hpp"

namespace kom::qp {

inline constexpr double inf = std::numeric_limits<double>::infinity();

/// Variables restricted to {0, level} with exactly `cardinality` of them at
/// `level`. Solved by relax-and-round, not branch-and-bound.
struct BinarySelection {
  std::vector<bool> mask;
  double level = 1.0;
  Eigen::Index cardinality = 0;
};

/// minimize 0.5 x'Px + q'x  s.t.  A_eq x = b_eq,  lower <= x <= upper
struct QuadraticProgram {
  Matrix P;
  Vector q;
  Matrix A_eq;
  Vector b_eq;
  Vector lower;
  Vector upper;
  std::optional<BinarySelection> binary;

  Eigen::Index size() const { return q.size(); }
  Eigen::Index equalities() const { return A_eq.rows(); }

  void check() const {
    const Eigen::Index m = q.size();
    if (P.rows() != m || P.cols() != m) throw Error(ErrorCode::dimension_mismatch, "P must be m x m");
    if (A_eq.cols() != m && A_eq.rows() > 0) throw Error(ErrorCode::dimension_mismatch, "A_eq must have m columns");
    if (A_eq.rows() != b_eq.size()) throw Error(ErrorCode::dimension_mismatch, "A_eq rows differ from b_eq length");
    if (lower.size() != m || upper.size() != m) throw Error(ErrorCode::dimension_mismatch, "bounds must have length m");
    if (!linalg::is_symmetric(P, 1e-9)) throw Error(ErrorCode::asymmetric_input, "P is not symmetric");
    for (Eigen::Index i = 0; i < m; ++i)
      if (!(lower(i) <= upper(i))) throw Error(ErrorCode::infeasible, "lower bound exceeds upper bound");
    if (binary && static_cast<Eigen::Index>(binary->mask.size()) != m)
      throw Error(ErrorCode::dimension_mismatch, "binary mask must have length m");
  }
};

enum class QPStatus { solved, max_iter, infeasible };

inline std::string_view to_string(QPStatus s) {
  switch (s) {
    case QPStatus::solved: return "solved";
    case QPStatus::max_iter: return "max_iter";
    case QPStatus::infeasible: return "infeasible";
  }
  return "?";
}

struct QPSettings {
  double rho = 0.1;
  double sigma = 1e-6;
  double relaxation = 1.6;
  double eps_primal = 1e-6;
  double eps_dual = 1e-6;
  int max_iter = 100000;
  double psd_jitter = 1e-8;
  bool polish = true;
  int check_interval = 25;
  double adaptive_rho_ratio = 10.0;
  int divergence_window = 1000;
};

struct QPSolution {
  Vector x;
  Vector y_eq;     // multipliers of A_eq x = b_eq
  Vector y_bound;  // signed bound multipliers: < 0 at an active lower bound, > 0 at an active upper bound
  double objective = 0.0;
  double primal_residual = 0.0;  // scaled by max(1, |x|_inf)
  double dual_residual = 0.0;    // scaled by max(1, |q|_inf, |Px|_inf)
  int iterations = 0;
  QPStatus status = QPStatus::max_iter;
  bool polished = false;
  int rho_updates = 0;
  double relaxation_objective = std::numeric_limits<double>::quiet_NaN();  // relax-and-round lower bound
};

inline double objective(const QuadraticProgram& qp, const Vector& x) { return 0.5 * x.dot(qp.P * x) + qp.q.dot(x); }

struct KKTResiduals {
  double stationarity = 0.0;
  double primal_eq = 0.0;
  double primal_bound = 0.0;
  double complementarity = 0.0;
  double max() const { return std::max({stationarity, primal_eq, primal_bound, complementarity}); }
};

/// Infinity norms of the four KKT conditions at (x, y_eq, y_bound). A bound
/// multiplier whose sign does not match the bound it sits on (or that sits on
/// an infinite bound) counts fully toward complementarity.
inline KKTResiduals kkt_residuals(const QuadraticProgram& qp, const Vector& x, const Vector& y_eq,
                                  const Vector& y_bound) {
  const Eigen::Index m = qp.size();
  if (x.size() != m || y_bound.size() != m || y_eq.size() != qp.equalities())
    throw Error(ErrorCode::dimension_mismatch, "kkt_residuals: vector sizes do not match the program");
  KKTResiduals r;
  Vector grad = qp.P * x + qp.q + y_bound;
  if (qp.equalities() > 0) grad += qp.A_eq.transpose() * y_eq;
  r.stationarity = m ? grad.cwiseAbs().maxCoeff() : 0.0;
  if (qp.equalities() > 0) r.primal_eq = (qp.A_eq * x - qp.b_eq).cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < m; ++i) {
    r.primal_bound = std::max({r.primal_bound, qp.lower(i) - x(i), x(i) - qp.upper(i)});
    const double y = y_bound(i);
    double c = 0.0;
    if (y < 0.0) c = std::isfinite(qp.lower(i)) ? -y * std::abs(x(i) - qp.lower(i)) : -y;
    if (y > 0.0) c = std::isfinite(qp.upper(i)) ? y * std::abs(qp.upper(i) - x(i)) : y;
    r.complementarity = std::max(r.complementarity, c);
  }
  return r;
}

inline KKTResiduals kkt_residuals(const QuadraticProgram& qp, const QPSolution& s) {
  return kkt_residuals(qp, s.x, s.y_eq, s.y_bound);
}

namespace detail {

inline double inf_norm(const Vector& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

struct Scaled {
  double stat_scale = 1.0;
  double primal_scale = 1.0;
};

inline Scaled residual_scales(const QuadraticProgram& qp, const Vector& x) {
  Scaled s;
  s.primal_scale = std::max(1.0, inf_norm(x));
  s.stat_scale = std::max({1.0, inf_norm(qp.q), inf_norm(qp.P * x)});
  return s;
}

inline void finalize(const QuadraticProgram& qp, QPSolution& s) {
  for (Eigen::Index i = 0; i < s.x.size(); ++i) s.x(i) = std::clamp(s.x(i), qp.lower(i), qp.upper(i));
  s.objective = objective(qp, s.x);
  const auto r = kkt_residuals(qp, s);
  const auto sc = residual_scales(qp, s.x);
  s.primal_residual = std::max(r.primal_eq, r.primal_bound) / sc.primal_scale;
  s.dual_residual = std::max(r.stationarity, r.complementarity) / sc.stat_scale;
}

/// Active-set refinement of an approximate solution: fix the variables the
/// multipliers say are at a bound, solve the equality-constrained KKT system
/// for the rest, and repair sign or bound violations until the set settles.
inline bool polish(const QuadraticProgram& qp, const Matrix& Pj, QPSolution& sol, const QPSettings& st) {
  const Eigen::Index m = qp.size();
  const Eigen::Index k = qp.equalities();
  enum State : int { free_var = 0, at_lower = 1, at_upper = 2 };
  std::vector<int> state(static_cast<std::size_t>(m), free_var);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double l = qp.lower(i), u = qp.upper(i), x = sol.x(i), y = sol.y_bound(i);
    if (l == u) state[static_cast<std::size_t>(i)] = at_lower;
    else if (std::isfinite(l) && x - l < -y) state[static_cast<std::size_t>(i)] = at_lower;
    else if (std::isfinite(u) && u - x < y) state[static_cast<std::size_t>(i)] = at_upper;
  }

  const double xscale = std::max(1.0, inf_norm(sol.x));
  for (int round = 0; round < 40; ++round) {
    std::vector<Eigen::Index> F, B;
    for (Eigen::Index i = 0; i < m; ++i) (state[static_cast<std::size_t>(i)] == free_var ? F : B).push_back(i);
    const auto nf = static_cast<Eigen::Index>(F.size());

    Vector x = Vector::Zero(m);
    for (auto i : B) x(i) = state[static_cast<std::size_t>(i)] == at_upper ? qp.upper(i) : qp.lower(i);
    Vector y_eq = Vector::Zero(k);

    if (nf > 0) {
      Matrix Pff(nf, nf);
      Vector rhs(nf);
      Matrix Af(k, nf);
      for (Eigen::Index a = 0; a < nf; ++a) {
        for (Eigen::Index b = 0; b < nf; ++b) Pff(a, b) = Pj(F[a], F[b]);
        double r = -qp.q(F[a]);
        for (auto j : B) r -= Pj(F[a], j) * x(j);
        rhs(a) = r;
        for (Eigen::Index e = 0; e < k; ++e) Af(e, a) = qp.A_eq(e, F[a]);
      }
      Vector beq = qp.b_eq;
      for (auto j : B)
        for (Eigen::Index e = 0; e < k; ++e) beq(e) -= qp.A_eq(e, j) * x(j);

      linalg::CholeskyFactor f;
      try {
        f = linalg::cholesky(Pff, std::max(1e-8, 1e-6 * linalg::max_abs(Pff)));
      } catch (const Error&) {
        return false;
      }
      if (f.jitter_used > 0.0) Pff.diagonal().array() += f.jitter_used;
      // [Pff Af'; Af 0][dx; dy] = [r1; r2] through the Schur complement.
      const Matrix PiAt = k ? f.solve(Matrix(Af.transpose())) : Matrix(nf, 0);
      Eigen::CompleteOrthogonalDecomposition<Matrix> schur;
      if (k) schur.compute(Af * PiAt);
      auto kkt_solve = [&](const Vector& r1, const Vector& r2, Vector& dx, Vector& dy) {
        const Vector x0 = f.solve(r1);
        if (k == 0) {
          dx = x0;
          dy.resize(0);
          return;
        }
        dy = schur.solve(Vector(Af * x0 - r2));
        dx = x0 - PiAt * dy;
      };
      Vector xf, y;
      kkt_solve(rhs, beq, xf, y);
      for (int refine = 0; refine < 3; ++refine) {
        const Vector r1 = rhs - Pff * xf - (k ? Vector(Af.transpose() * y) : Vector::Zero(nf));
        const Vector r2 = beq - Af * xf;
        Vector dx, dy;
        kkt_solve(r1, r2, dx, dy);
        xf += dx;
        if (k) y += dy;
      }
      if (!xf.allFinite()) return false;
      for (Eigen::Index a = 0; a < nf; ++a) x(F[a]) = xf(a);
      y_eq = y;
    }

    Vector yb = -(Pj * x + qp.q);
    if (k) yb -= qp.A_eq.transpose() * y_eq;
    const double yscale = std::max({1.0, inf_norm(qp.q), inf_norm(Pj * x)});

    bool changed = false;
    for (Eigen::Index i = 0; i < m; ++i) {
      auto& s = state[static_cast<std::size_t>(i)];
      const double l = qp.lower(i), u = qp.upper(i);
      if (l == u) continue;
      if (s == free_var) {
        yb(i) = 0.0;
        if (x(i) < l - 1e-11 * xscale) {
          s = at_lower;
          changed = true;
        } else if (x(i) > u + 1e-11 * xscale) {
          s = at_upper;
          changed = true;
        }
      } else if (s == at_lower && yb(i) > 1e-9 * yscale) {
        s = free_var;
        changed = true;
      } else if (s == at_upper && yb(i) < -1e-9 * yscale) {
        s = free_var;
        changed = true;
      }
    }
    if (changed) continue;

    QPSolution cand = sol;
    cand.x = x;
    cand.y_eq = y_eq;
    cand.y_bound = yb;
    finalize(qp, cand);
    if (cand.primal_residual <= st.eps_primal && cand.dual_residual <= st.eps_dual) {
      cand.polished = true;
      cand.status = QPStatus::solved;
      sol = std::move(cand);
      return true;
    }
    return false;
  }
  return false;
}

}  // namespace detail

/// OSQP-style ADMM on  l <= [A_eq; I] x <= u  with one dense factorization
/// reused across iterations (refactored when rho adapts), then active-set
/// polishing. The objective matrix is inflated by psd_jitter * I.
inline QPSolution solve(const QuadraticProgram& qp, const QPSettings& st = {}) {
  qp.check();
  const Eigen::Index m = qp.size();
  const Eigen::Index k = qp.equalities();

  Matrix Pj = qp.P;
  Pj.diagonal().array() += st.psd_jitter;

  QPSolution sol;
  sol.x = Vector::Zero(m);
  sol.y_eq = Vector::Zero(k);
  sol.y_bound = Vector::Zero(m);
  if (m == 0) {
    sol.status = QPStatus::solved;
    return sol;
  }

  // Cost scaling keeps rho meaningful regardless of the units of P and q.
  const double cost_norm = std::max(linalg::max_abs(Pj), detail::inf_norm(qp.q));
  const double c = cost_norm > 0.0 ? std::clamp(1.0 / cost_norm, 1e-8, 1e8) : 1.0;
  const Matrix Ps = c * Pj;
  const Vector qs = c * qp.q;

  // Constraint rows: k equalities then one row per variable.
  const Eigen::Index nc = k + m;
  Vector lc(nc), uc(nc);
  lc.head(k) = qp.b_eq;
  uc.head(k) = qp.b_eq;
  lc.tail(m) = qp.lower;
  uc.tail(m) = qp.upper;

  double rho = st.rho;
  Vector rho_vec(nc);
  auto set_rho = [&](double r) {
    for (Eigen::Index i = 0; i < nc; ++i) {
      if (lc(i) == uc(i)) rho_vec(i) = 1e3 * r;
      else if (!std::isfinite(lc(i)) && !std::isfinite(uc(i))) rho_vec(i) = 1e-6;
      else rho_vec(i) = r;
    }
  };
  auto apply_C = [&](const Vector& x) {
    Vector out(nc);
    if (k) out.head(k) = qp.A_eq * x;
    out.tail(m) = x;
    return out;
  };
  auto apply_Ct = [&](const Vector& v) {
    Vector out = v.tail(m);
    if (k) out += qp.A_eq.transpose() * v.head(k);
    return out;
  };

  linalg::CholeskyFactor factor;
  auto refactor = [&]() {
    Matrix M = Ps;
    M.diagonal().array() += st.sigma;
    if (k) M += qp.A_eq.transpose() * rho_vec.head(k).asDiagonal() * qp.A_eq;
    M.diagonal() += rho_vec.tail(m);
    factor = linalg::cholesky(M, 1e-6 * std::max(1.0, M.diagonal().maxCoeff()));
  };
  set_rho(rho);
  refactor();

  Vector x = Vector::Zero(m);
  for (Eigen::Index i = 0; i < m; ++i) x(i) = std::isfinite(qp.lower(i)) ? qp.lower(i) : (std::isfinite(qp.upper(i)) ? qp.upper(i) : 0.0);
  Vector z = apply_C(x).cwiseMax(lc).cwiseMin(uc);
  Vector y = Vector::Zero(nc);

  auto unscaled_into = [&](QPSolution& s, const Vector& xs, const Vector& ys) {
    s.x = xs;
    s.y_eq = ys.head(k) / c;
    s.y_bound = ys.tail(m) / c;
  };

  const double alpha = st.relaxation;
  int next_polish = 200;
  double window_rp = inf, window_y = 0.0, window_growth = 0.0;
  int stalled_windows = 0;

  for (int it = 1; it <= st.max_iter; ++it) {
    const Vector rhs = st.sigma * x - qs + apply_Ct(rho_vec.cwiseProduct(z) - y);
    const Vector xt = factor.solve(rhs);
    const Vector zt = apply_C(xt);
    x = alpha * xt + (1.0 - alpha) * x;
    const Vector zh = alpha * zt + (1.0 - alpha) * z;
    const Vector znew = (zh + y.cwiseQuotient(rho_vec)).cwiseMax(lc).cwiseMin(uc);
    y += rho_vec.cwiseProduct(zh - znew);
    z = znew;
    sol.iterations = it;

    if (it % st.check_interval != 0 && it != st.max_iter) continue;

    const Vector Cx = apply_C(x);
    const Vector Px = Ps * x;
    const Vector Cty = apply_Ct(y);
    const double rp = detail::inf_norm(Cx - z);
    const double rd = detail::inf_norm(Px + qs + Cty);
    const double prim_scale = std::max(detail::inf_norm(Cx), detail::inf_norm(z));
    const double dual_scale = std::max({detail::inf_norm(Px), detail::inf_norm(Cty), detail::inf_norm(qs)});
    const bool converged = rp <= st.eps_primal * (1.0 + prim_scale) && rd <= st.eps_dual * (1.0 + dual_scale);

    if (converged || (st.polish && it >= next_polish)) {
      QPSolution cand = sol;
      unscaled_into(cand, x, y);
      detail::finalize(qp, cand);
      if (st.polish && detail::polish(qp, Pj, cand, st)) {
        cand.iterations = it;
        return cand;
      }
      if (converged) {
        cand.status = QPStatus::solved;
        cand.iterations = it;
        return cand;
      }
      next_polish *= 2;
    }

    // Adaptive rho from the normalized residual ratio.
    // Primal side measured row by row, so one large equality right-hand side
    // does not hide bound violations. With q = 0 the dual scale can vanish at
    // the optimum; after cost scaling |P| <= 1, so 1e-3 |x| is a floor.
    double num = 0.0;
    for (Eigen::Index i = 0; i < nc; ++i)
      num = std::max(num, std::abs(Cx(i) - z(i)) / std::max({1.0, std::abs(Cx(i)), std::abs(z(i))}));
    const double den = rd / std::max({dual_scale, 1e-3 * detail::inf_norm(x), 1e-30});
    if (num > 0.0 && den > 0.0) {
      const double ratio = std::sqrt(num / den);
      if (ratio > st.adaptive_rho_ratio || ratio < 1.0 / st.adaptive_rho_ratio) {
        const double new_rho = std::clamp(rho * ratio, 1e-6, 1e6);
        if (new_rho != rho) {
          rho = new_rho;
          set_rho(rho);
          refactor();
          ++sol.rho_updates;
        }
      }
    }

    // Divergence heuristic: multipliers keep growing while the primal
    // residual makes no progress across whole windows.
    if (it % st.divergence_window == 0) {
      const double ynorm = detail::inf_norm(y);
      const double growth = ynorm - window_y;
      if (rp > 0.5 * window_rp && growth > 0.0 && growth >= 0.5 * window_growth && ynorm > 1e6) {
        if (++stalled_windows >= 2) {
          unscaled_into(sol, x, y);
          detail::finalize(qp, sol);
          sol.status = QPStatus::infeasible;
          return sol;
        }
      } else {
        stalled_windows = 0;
      }
      window_rp = std::min(window_rp, rp);
      window_y = ynorm;
      window_growth = growth;
    }
  }

  unscaled_into(sol, x, y);
  detail::finalize(qp, sol);
  sol.status = QPStatus::max_iter;
  return sol;
}

/// Indices of the `count` largest entries of `values` over `candidates`; ties
/// go to the lower index.
inline std::vector<Eigen::Index> top_k(const Vector& values, std::vector<Eigen::Index> candidates, Eigen::Index count) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return values(a) > values(b); });
  candidates.resize(static_cast<std::size_t>(std::min<Eigen::Index>(count, static_cast<Eigen::Index>(candidates.size()))));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

/// Three phases: continuous relaxation with masked variables in [0, level];
/// fix the `cardinality` largest masked variables at `level` and the rest at
/// zero; re-solve the remaining continuous problem. The relaxation objective
/// is a lower bound on the exact selection problem.
inline QPSolution solve_relax_and_round(const QuadraticProgram& qp, const QPSettings& st = {}) {
  qp.check();
  if (!qp.binary) throw Error(ErrorCode::invalid_argument, "solve_relax_and_round needs a binary mask");
  const auto& sel = *qp.binary;
  std::vector<Eigen::Index> masked;
  for (Eigen::Index i = 0; i < qp.size(); ++i)
    if (sel.mask[static_cast<std::size_t>(i)]) masked.push_back(i);
  if (sel.cardinality < 1 || sel.cardinality > static_cast<Eigen::Index>(masked.size()))
    throw Error(ErrorCode::invalid_subset_size, "cardinality must be between 1 and the number of masked variables");

  QuadraticProgram relaxed = qp;
  relaxed.binary.reset();
  for (auto i : masked) {
    relaxed.lower(i) = std::max(relaxed.lower(i), 0.0);
    relaxed.upper(i) = std::min(relaxed.upper(i), sel.level);
  }
  QPSolution phase1 = solve(relaxed, st);
  if (phase1.status != QPStatus::solved) return phase1;

  const auto chosen = top_k(phase1.x, masked, sel.cardinality);
  QuadraticProgram fixed = relaxed;
  for (auto i : masked) fixed.lower(i) = fixed.upper(i) = 0.0;
  for (auto i : chosen) fixed.lower(i) = fixed.upper(i) = sel.level;
  QPSolution phase3 = solve(fixed, st);
  phase3.relaxation_objective = phase1.objective;
  phase3.iterations += phase1.iterations;
  return phase3;
}

}  // namespace kom::qp
