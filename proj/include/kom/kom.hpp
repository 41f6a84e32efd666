#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <utility>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kom/baselines.hpp"
#include "kom/core_model.hpp"
#include "kom/error.hpp"
#include "kom/gp_tune.hpp"
#include "kom/kernels.hpp"
#include "kom/linalg.hpp"
#include "kom/qp_solver.hpp"

namespace kom {

enum class KomMode { fixed_v, kowate, kosate };

inline std::string_view to_string(KomMode m) {
  switch (m) {
    case KomMode::fixed_v: return "fixed_v";
    case KomMode::kowate: return "kowate";
    case KomMode::kosate: return "kosate";
  }
  return "?";
}

/// Everything the weight problems need once the kernels are fixed. Grams are
/// full n x n over all units.
struct KomProblem {
  Matrix K1;
  Matrix K0;
  std::optional<TargetWeights> V;  // fixed_v only
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  std::optional<Vector> unit_penalty;  // per-unit variance penalty, replaces lambda0/lambda1
  Vector S;
  Vector T;
  KomMode mode = KomMode::fixed_v;
  Eigen::Index subset_size = 0;  // n', kosate
  double v_penalty = 0.0;        // optional ridge on V in the variable-V problem

  Eigen::Index n() const { return S.size(); }
};

// ---------------------------------------------------------------------------
// Worst-case discrepancy and CMSE. V is on the unit-mean scale (sum V = n).

inline double worst_case_discrepancy_sq(const Vector& W, const Vector& V, const Matrix& K, const Vector& S,
                                        const Vector& T, int t) {
  const Eigen::Index n = W.size();
  if (V.size() != n || K.rows() != n || K.cols() != n || S.size() != n || T.size() != n)
    throw Error(ErrorCode::dimension_mismatch, "worst_case_discrepancy_sq: sizes disagree");
  Vector d(n);
  for (Eigen::Index i = 0; i < n; ++i) d(i) = (S(i) == 1.0 && T(i) == static_cast<double>(t) ? W(i) : 0.0) - V(i);
  return d.dot(K * d) / (static_cast<double>(n) * static_cast<double>(n));
}

struct CmseTerms {
  double total = 0.0;
  double delta1_sq = 0.0;
  double delta0_sq = 0.0;
  double penalty = 0.0;
};

inline Vector penalty_diagonal(const Vector& S, const Vector& T, double lambda0, double lambda1,
                               const std::optional<Vector>& unit_penalty) {
  const Eigen::Index n = S.size();
  Vector pen(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double lam = unit_penalty ? (*unit_penalty)(i) : (T(i) == 1.0 ? lambda1 : lambda0);
    pen(i) = S(i) == 1.0 ? lam : 0.0;
  }
  return pen;
}

inline CmseTerms worst_case_cmse(const Vector& W, const Vector& V, const Matrix& K1, const Matrix& K0, double lambda0,
                                 double lambda1, const Vector& S, const Vector& T,
                                 const std::optional<Vector>& unit_penalty = std::nullopt) {
  const double n = static_cast<double>(W.size());
  CmseTerms c;
  c.delta1_sq = worst_case_discrepancy_sq(W, V, K1, S, T, 1);
  c.delta0_sq = worst_case_discrepancy_sq(W, V, K0, S, T, 0);
  const Vector pen = penalty_diagonal(S, T, lambda0, lambda1, unit_penalty);
  c.penalty = pen.dot(W.cwiseProduct(W)) / (n * n);
  c.total = c.delta1_sq + c.delta0_sq + c.penalty;
  return c;
}

inline CmseTerms worst_case_cmse(const Vector& W, const Vector& V, const KomProblem& p) {
  return worst_case_cmse(W, V, p.K1, p.K0, p.lambda0, p.lambda1, p.S, p.T, p.unit_penalty);
}

// ---------------------------------------------------------------------------
// QP assembly. The solver minimizes 0.5 x'Px + q'x; with the choices below
// 0.5 x'Px + q'x + constant = n^2 * (worst-case CMSE).

struct AssembledQP {
  qp::QuadraticProgram qp;
  double constant = 0.0;  // dropped V'K_tV terms (fixed V only)
  double scale = 1.0;     // multiply (objective + constant) by this to get the CMSE
};

namespace detail {

inline void check_arms(const Vector& S, const Vector& T) {
  const auto r = count_roles(T, S);
  if (r.treated == 0) throw Error(ErrorCode::empty_arm, "no treated units in the study sample");
  if (r.control == 0) throw Error(ErrorCode::empty_arm, "no control units in the study sample");
}

inline void check_problem(const KomProblem& p) {
  const Eigen::Index n = p.n();
  if (p.T.size() != n || p.K1.rows() != n || p.K1.cols() != n || p.K0.rows() != n || p.K0.cols() != n)
    throw Error(ErrorCode::dimension_mismatch, "KomProblem sizes disagree");
  if (p.lambda0 < 0.0 || p.lambda1 < 0.0) throw Error(ErrorCode::invalid_argument, "lambda must be >= 0");
  check_arms(p.S, p.T);
}

/// Arm-masked block sum_t I_S I_t (K_t) I_t I_S.
inline Matrix arm_block(const KomProblem& p) {
  const Eigen::Index n = p.n();
  Matrix B = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (p.S(j) != 1.0) continue;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (p.S(i) != 1.0 || p.T(i) != p.T(j)) continue;
      B(i, j) = p.T(i) == 1.0 ? p.K1(i, j) : p.K0(i, j);
    }
  }
  return B;
}

/// Rows sum_t I_S I_t K_t.
inline Matrix arm_rows_block(const KomProblem& p) {
  const Eigen::Index n = p.n();
  Matrix B = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (p.S(i) != 1.0) continue;
    B.row(i) = p.T(i) == 1.0 ? p.K1.row(i) : p.K0.row(i);
  }
  return B;
}

inline void add_w_constraints(const KomProblem& p, Matrix& A, Vector& b, Vector& lo, Vector& hi) {
  const Eigen::Index n = p.n();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (p.S(i) == 1.0) {
      A(p.T(i) == 1.0 ? 0 : 1, i) = 1.0;
      lo(i) = 0.0;
      hi(i) = qp::inf;
    } else {
      lo(i) = hi(i) = 0.0;
    }
  }
  b(0) = b(1) = static_cast<double>(n);
}

}  // namespace detail

/// Fixed target weights: minimize over W in {W >= 0, each arm sums to n}.
inline AssembledQP build_fixed_v_qp(const KomProblem& p) {
  detail::check_problem(p);
  if (!p.V) throw Error(ErrorCode::invalid_argument, "fixed-V problem needs target weights");
  const Eigen::Index n = p.n();
  const Vector V = p.V->to_unit_mean().V;
  if (V.size() != n) throw Error(ErrorCode::dimension_mismatch, "target weights length differs from n");

  AssembledQP out;
  auto& q = out.qp;
  q.P = 2.0 * detail::arm_block(p);
  q.P.diagonal() += 2.0 * penalty_diagonal(p.S, p.T, p.lambda0, p.lambda1, p.unit_penalty);
  q.q = -2.0 * detail::arm_rows_block(p) * V;
  q.A_eq = Matrix::Zero(2, n);
  q.b_eq = Vector::Zero(2);
  q.lower.resize(n);
  q.upper.resize(n);
  detail::add_w_constraints(p, q.A_eq, q.b_eq, q.lower, q.upper);
  out.constant = V.dot(p.K1 * V) + V.dot(p.K0 * V);
  out.scale = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  return out;
}

/// Joint problem over x = (W, V) with V on the unit-mean scale. KOWATE lets V
/// range over the scaled simplex; KOSATE restricts V to {0, n/n'} on study
/// units via a binary mask.
inline AssembledQP build_variable_v_qp(const KomProblem& p) {
  detail::check_problem(p);
  if (p.mode == KomMode::fixed_v) throw Error(ErrorCode::invalid_argument, "build_variable_v_qp needs kowate or kosate");
  const Eigen::Index n = p.n();
  const auto roles = count_roles(p.T, p.S);
  if (p.mode == KomMode::kosate && (p.subset_size < 1 || p.subset_size > roles.study()))
    throw Error(ErrorCode::invalid_subset_size,
                "subset size " + std::to_string(p.subset_size) + " not in [1, " + std::to_string(roles.study()) + "]");

  AssembledQP out;
  auto& q = out.qp;
  const Eigen::Index m = 2 * n;
  q.P = Matrix::Zero(m, m);
  q.P.topLeftCorner(n, n) = 2.0 * detail::arm_block(p);
  q.P.topLeftCorner(n, n).diagonal() += 2.0 * penalty_diagonal(p.S, p.T, p.lambda0, p.lambda1, p.unit_penalty);
  const Matrix cross = -2.0 * detail::arm_rows_block(p);
  q.P.topRightCorner(n, n) = cross;
  q.P.bottomLeftCorner(n, n) = cross.transpose();
  q.P.bottomRightCorner(n, n) = 2.0 * (p.K1 + p.K0);
  if (p.v_penalty > 0.0) q.P.bottomRightCorner(n, n).diagonal().array() += 2.0 * p.v_penalty;
  q.P = 0.5 * (q.P + q.P.transpose());
  q.q = Vector::Zero(m);

  q.A_eq = Matrix::Zero(3, m);
  q.b_eq = Vector::Zero(3);
  q.lower.resize(m);
  q.upper.resize(m);
  Matrix Aw = Matrix::Zero(2, n);
  Vector bw(2), lw(n), hw(n);
  detail::add_w_constraints(p, Aw, bw, lw, hw);
  q.A_eq.topLeftCorner(2, n) = Aw;
  q.b_eq.head(2) = bw;
  q.lower.head(n) = lw;
  q.upper.head(n) = hw;
  q.A_eq.row(2).tail(n).setOnes();
  q.b_eq(2) = static_cast<double>(n);

  if (p.mode == KomMode::kowate) {
    q.lower.tail(n).setZero();
    q.upper.tail(n).setConstant(qp::inf);
  } else {
    const double level = static_cast<double>(n) / static_cast<double>(p.subset_size);
    qp::BinarySelection sel;
    sel.mask.assign(static_cast<std::size_t>(m), false);
    sel.level = level;
    sel.cardinality = p.subset_size;
    for (Eigen::Index i = 0; i < n; ++i) {
      q.lower(n + i) = 0.0;
      q.upper(n + i) = p.S(i) == 1.0 ? level : 0.0;
      sel.mask[static_cast<std::size_t>(n + i)] = p.S(i) == 1.0;
    }
    q.binary = std::move(sel);
  }
  out.scale = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  return out;
}

// ---------------------------------------------------------------------------

struct KomWeights {
  Vector W;
  std::optional<Vector> V_star;  // simplex scale (sum 1), variable-V modes
  Vector V_used;                 // unit-mean target the weights were fitted to
  double objective = 0.0;        // worst-case CMSE at the solution
  double delta1_sq = 0.0;
  double delta0_sq = 0.0;
  double variance_penalty = 0.0;
  double qp_objective = 0.0;     // raw solver objective
  double relaxation_bound = std::numeric_limits<double>::quiet_NaN();  // kosate: CMSE of the relaxation
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  int degree_used = 0;
  KernelFamily family_used = KernelFamily::poly_mahalanobis;
  std::array<GPHyperparams, 2> hyper{};  // [control, treated]
  double jitter_used = 0.0;
  qp::QPStatus status = qp::QPStatus::max_iter;
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  bool polished = false;
  int fallbacks = 0;
};

inline KomWeights solve_kom_problem(const KomProblem& p, const qp::QPSettings& settings = {}) {
  KomWeights out;
  out.lambda0 = p.lambda0;
  out.lambda1 = p.lambda1;
  const Eigen::Index n = p.n();
  const AssembledQP a = p.mode == KomMode::fixed_v ? build_fixed_v_qp(p) : build_variable_v_qp(p);
  const qp::QPSolution sol = p.mode == KomMode::kosate ? qp::solve_relax_and_round(a.qp, settings)
                                                       : qp::solve(a.qp, settings);
  out.status = sol.status;
  out.iterations = sol.iterations;
  out.primal_residual = sol.primal_residual;
  out.dual_residual = sol.dual_residual;
  out.polished = sol.polished;
  out.qp_objective = sol.objective;

  out.W = sol.x.head(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (p.S(i) != 1.0) out.W(i) = 0.0;
  if (p.mode == KomMode::fixed_v) {
    out.V_used = p.V->to_unit_mean().V;
  } else {
    out.V_used = sol.x.tail(n).cwiseMax(0.0);
    out.V_star = TargetWeights{out.V_used, Normalization::unit_mean}.to_simplex().V;
    if (std::isfinite(sol.relaxation_objective)) out.relaxation_bound = sol.relaxation_objective * a.scale;
  }
  const CmseTerms c = worst_case_cmse(out.W, out.V_used, p);
  out.delta1_sq = std::max(0.0, c.delta1_sq);
  out.delta0_sq = std::max(0.0, c.delta0_sq);
  out.variance_penalty = c.penalty;
  out.objective = out.delta1_sq + out.delta0_sq + out.variance_penalty;
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end: kernels, tuning, lambda policy, degree ladder.

struct KernelRung {
  KernelFamily family = KernelFamily::poly_mahalanobis;
  int degree = 2;
};

inline std::vector<KernelRung> default_ladder() {
  return {{KernelFamily::product_poly, 2},
          {KernelFamily::poly_mahalanobis, 3},
          {KernelFamily::poly_mahalanobis, 2},
          {KernelFamily::poly_mahalanobis, 1}};
}

enum class LambdaPolicyKind { gp_tuned, zero, fixed };

struct LambdaPolicy {
  LambdaPolicyKind kind = LambdaPolicyKind::gp_tuned;
  double value = 0.0;  // fixed
  LambdaConvention convention = LambdaConvention::sigma2_over_gamma_sq;
};

/// Tuned hyperparameters keyed by kernel rung, so several estimands fitted to
/// the same data tune each rung once.
using HyperCache = std::map<std::pair<int, int>, std::array<GPHyperparams, 2>>;

struct KomOptions {
  std::vector<KernelRung> ladder = default_ladder();
  LambdaPolicy lambda;
  bool tune_kernel = true;  // tune (gamma, theta, sigma2) per arm for each rung tried
  std::optional<std::array<GPHyperparams, 2>> hyper;  // fixed hyperparameters, [control, treated]
  HyperCache* cache = nullptr;  // optional, read and filled when tuning
  TuneOptions tune_options;
  std::optional<Vector> propensity;  // for owate/osate targets and the default kosate n'
  int propensity_degree = 4;
  qp::QPSettings qp;
  double v_penalty = 0.0;
};

struct RungReport {
  KernelRung rung;
  std::string outcome;  // "solved", solver status, or the error text
};

class LadderError : public Error {
 public:
  LadderError(const std::string& what, std::vector<RungReport> reports)
      : Error(ErrorCode::all_degrees_failed, what), reports_(std::move(reports)) {}
  const std::vector<RungReport>& reports() const { return reports_; }

 private:
  std::vector<RungReport> reports_;
};

inline Vector propensity_for(const Dataset& d, const KomOptions& opt) {
  if (opt.propensity) return *opt.propensity;
  return fit_treatment_model(d, opt.propensity_degree).predict(d.X);
}

/// Target size for KOSATE when none is given: the number of study units OSATE
/// keeps at the same alpha.
inline Eigen::Index default_subset_size(const Dataset& d, const Vector& phi, double alpha) {
  Eigen::Index kept = 0;
  for (Eigen::Index i = 0; i < d.n(); ++i)
    if (d.in_study(i) && truncation_keeps(phi(i), alpha)) ++kept;
  return std::max<Eigen::Index>(kept, 1);
}

inline KomWeights solve_kom(const Dataset& d, const EstimandSpec& spec, const KomOptions& opt = {}) {
  if (opt.ladder.empty()) throw Error(ErrorCode::invalid_argument, "kernel ladder is empty");
  const Standardizer st = Standardizer::fit(d.X);

  KomProblem base;
  base.S = d.S;
  base.T = d.T;
  base.v_penalty = opt.v_penalty;
  std::optional<Vector> phi;
  if (spec.needs_propensity() || (spec.kind == EstimandKind::kosate && spec.subset_size == 0))
    phi = propensity_for(d, opt);
  switch (spec.kind) {
    case EstimandKind::kowate:
      base.mode = KomMode::kowate;
      break;
    case EstimandKind::kosate:
      base.mode = KomMode::kosate;
      base.subset_size = spec.subset_size > 0 ? spec.subset_size : default_subset_size(d, *phi, spec.alpha);
      break;
    default:
      base.mode = KomMode::fixed_v;
      base.V = fixed_target_weights(spec, d, phi);
  }

  std::vector<RungReport> reports;
  for (std::size_t r = 0; r < opt.ladder.size(); ++r) {
    const KernelRung rung = opt.ladder[r];
    try {
      std::array<GPHyperparams, 2> hyper;
      if (opt.hyper) {
        hyper = *opt.hyper;
      } else if (opt.tune_kernel) {
        const std::pair<int, int> key{static_cast<int>(rung.family), rung.degree};
        if (opt.cache && opt.cache->count(key)) {
          hyper = opt.cache->at(key);
        } else {
          for (int arm = 0; arm < 2; ++arm)
            hyper[static_cast<std::size_t>(arm)] = tune(d, arm, rung.family, rung.degree, st, opt.tune_options);
          if (opt.cache) (*opt.cache)[key] = hyper;
        }
      } else {
        hyper[0].arm = 0;
        hyper[1].arm = 1;
      }

      KomProblem p = base;
      const Matrix Z = st.coordinates(d.X, rung.family);
      double jitter = 0.0;
      bool indefinite = false;
      for (int arm = 0; arm < 2; ++arm) {
        const auto& h = hyper[static_cast<std::size_t>(arm)];
        GramMatrix g = gram_from_coordinates(Z, KernelConfig{rung.family, rung.degree, h.gamma, h.theta});
        const auto diag = psd_check(g);
        jitter = std::max(jitter, diag.jitter_used);
        indefinite = indefinite || diag.indefinite;
        (arm == 1 ? p.K1 : p.K0) = std::move(g.K);
      }
      if (indefinite) {
        reports.push_back({rung, "gram flagged numerically indefinite"});
        continue;
      }
      switch (opt.lambda.kind) {
        case LambdaPolicyKind::gp_tuned:
          p.lambda0 = lambda_from(hyper[0], opt.lambda.convention);
          p.lambda1 = lambda_from(hyper[1], opt.lambda.convention);
          break;
        case LambdaPolicyKind::zero:
          p.lambda0 = p.lambda1 = 0.0;
          break;
        case LambdaPolicyKind::fixed:
          p.lambda0 = p.lambda1 = opt.lambda.value;
          break;
      }

      KomWeights w = solve_kom_problem(p, opt.qp);
      if (w.status != qp::QPStatus::solved) {
        reports.push_back({rung, std::string(qp::to_string(w.status))});
        continue;
      }
      w.degree_used = rung.degree;
      w.family_used = rung.family;
      w.hyper = hyper;
      w.jitter_used = jitter;
      w.fallbacks = static_cast<int>(r);
      return w;
    } catch (const Error& e) {
      if (e.code() == ErrorCode::empty_arm || e.code() == ErrorCode::invalid_subset_size ||
          e.code() == ErrorCode::arm_too_small)
        throw;
      reports.push_back({rung, e.what()});
    }
  }
  throw LadderError("every kernel in the ladder failed", std::move(reports));
}

}  // namespace kom
