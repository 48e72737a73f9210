#pragma once

// Convex-set geometry (projections, tangent cones) and the dense active-set
// QP solver that every projection-type operation reduces to.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "fbopt/core.hpp"

namespace fbopt::convex {

// Constraint i of {a_i^T x <= b_i} counts as active at x iff
// a_i^T x - b_i >= -kActivityTol * (1 + |b_i|).
inline constexpr double kActivityTol = 1e-9;
inline constexpr double kMembershipTol = 1e-8;

// ---------------------------------------------------------------------------
// Metric: x |-> Q(x), symmetric positive definite.

class Metric {
 public:
  Metric() : kind_(Kind::Identity) {}

  static Metric identity() { return Metric(); }

  static Metric constant(Mat Q) {
    Metric m;
    m.kind_ = Kind::Constant;
    m.constant_ = std::move(Q);
    return m;
  }

  static Metric varying(std::function<Mat(const Vec&)> eval) {
    Metric m;
    m.kind_ = Kind::Varying;
    m.eval_ = std::move(eval);
    return m;
  }

  bool is_identity() const { return kind_ == Kind::Identity; }
  bool is_constant() const { return kind_ != Kind::Varying; }

  Mat eval(const Vec& x) const {
    switch (kind_) {
      case Kind::Identity:
        return Mat::Identity(x.size(), x.size());
      case Kind::Constant:
        return constant_;
      default:
        return eval_(x);
    }
  }

  // Metric whose matrix is Q(x)^{-1}.
  Metric inverse() const {
    switch (kind_) {
      case Kind::Identity:
        return identity();
      case Kind::Constant: {
        Eigen::LLT<Mat> llt(constant_);
        if (llt.info() != Eigen::Success)
          throw SingularHessian("Metric::inverse: matrix not SPD");
        return constant(llt.solve(Mat::Identity(constant_.rows(), constant_.cols())));
      }
      default: {
        auto f = eval_;
        return varying([f](const Vec& x) -> Mat {
          Mat Q = f(x);
          Eigen::LLT<Mat> llt(Q);
          if (llt.info() != Eigen::Success)
            throw SingularHessian("Metric::inverse: matrix not SPD");
          return llt.solve(Mat::Identity(Q.rows(), Q.cols()));
        });
      }
    }
  }

  // Symmetry within 1e-12 relative and smallest eigenvalue > 0.
  void check_spd(const Vec& x) const {
    if (is_identity()) return;
    Mat Q = eval(x);
    double scale = std::max(1.0, Q.norm());
    if ((Q - Q.transpose()).norm() > 1e-12 * scale)
      throw Error("Metric: matrix not symmetric at queried point");
    Eigen::SelfAdjointEigenSolver<Mat> es(Q, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw SingularHessian("Metric: matrix not positive definite at queried point");
  }

 private:
  enum class Kind { Identity, Constant, Varying };
  Kind kind_;
  Mat constant_;
  std::function<Mat(const Vec&)> eval_;
};

// ---------------------------------------------------------------------------
// QP: minimize 1/2 w^T H w + f^T w  s.t.  A_ineq w <= b_ineq, A_eq w = b_eq.

struct QpProblem {
  Mat H;
  Vec f;
  Mat A_ineq;  // may have zero rows
  Vec b_ineq;
  Mat A_eq;  // may have zero rows
  Vec b_eq;

  static QpProblem unconstrained(Mat H, Vec f) {
    QpProblem p;
    const auto n = f.size();
    p.H = std::move(H);
    p.f = std::move(f);
    p.A_ineq = Mat::Zero(0, n);
    p.b_ineq = Vec::Zero(0);
    p.A_eq = Mat::Zero(0, n);
    p.b_eq = Vec::Zero(0);
    return p;
  }

  void validate() const {
    require_dims(H.rows() == H.cols() && H.rows() == f.size(), "QpProblem: H/f dims");
    require_dims(A_ineq.rows() == b_ineq.size() && (A_ineq.rows() == 0 || A_ineq.cols() == f.size()),
                 "QpProblem: inequality dims");
    require_dims(A_eq.rows() == b_eq.size() && (A_eq.rows() == 0 || A_eq.cols() == f.size()),
                 "QpProblem: equality dims");
  }
};

struct QpSolution {
  Vec w;
  std::vector<int> active_set;  // inequality rows active at the solution
  Vec ineq_multipliers;         // one per inequality row, >= 0
  Vec eq_multipliers;           // one per equality row
  int iterations = 0;
};

namespace detail {

// Solve the equality-constrained KKT system
//   [H  C^T] [p ]   [-g]
//   [C   0 ] [lm] = [ r]
// C must have full row rank (the caller maintains an independent working set).
inline bool kkt_solve(const Mat& H, const Mat& C, const Vec& g, const Vec& r, Vec* p, Vec* lam) {
  const int n = static_cast<int>(H.rows());
  const int m = static_cast<int>(C.rows());
  Mat K(n + m, n + m);
  K.setZero();
  K.topLeftCorner(n, n) = H;
  if (m > 0) {
    K.topRightCorner(n, m) = C.transpose();
    K.bottomLeftCorner(m, n) = C;
  }
  Vec rhs(n + m);
  rhs.head(n) = -g;
  rhs.tail(m) = r;
  Eigen::FullPivLU<Mat> lu(K);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) return false;
  Vec sol = lu.solve(rhs);
  *p = sol.head(n);
  *lam = sol.tail(m);
  return true;
}

// True if row is (numerically) in the row space of C.
inline bool row_dependent(const Mat& C, const Vec& row) {
  if (C.rows() == 0) return row.norm() <= 1e-14;
  Eigen::ColPivHouseholderQR<Mat> qr(C.transpose());
  Vec coeff = qr.solve(row);
  return (C.transpose() * coeff - row).norm() <= 1e-10 * (1.0 + row.norm());
}

}  // namespace detail

// Primal active-set solver for strictly convex dense QPs. Pivot selection uses
// Bland's rule (lowest eligible index) so degenerate working sets cannot cycle.
// `start` must be feasible when supplied; without it a Phase-I QP with slacks
// locates a feasible point first.
inline QpSolution qp_solve(const QpProblem& prob, std::optional<Vec> start = std::nullopt) {
  prob.validate();
  const int n = static_cast<int>(prob.f.size());
  const int mi = static_cast<int>(prob.A_ineq.rows());
  const int me = static_cast<int>(prob.A_eq.rows());

  {
    Eigen::LLT<Mat> llt(prob.H);
    if (llt.info() != Eigen::Success)
      throw Error("qp_solve: H is not symmetric positive definite");
  }

  const double feas_tol = 1e-9;
  auto feasible = [&](const Vec& w) {
    for (int i = 0; i < mi; ++i)
      if (prob.A_ineq.row(i).dot(w) - prob.b_ineq[i] > feas_tol * (1.0 + std::abs(prob.b_ineq[i])))
        return false;
    for (int j = 0; j < me; ++j)
      if (std::abs(prob.A_eq.row(j).dot(w) - prob.b_eq[j]) > feas_tol * (1.0 + std::abs(prob.b_eq[j])))
        return false;
    return true;
  };

  Vec w;
  if (start && feasible(*start)) {
    w = *start;
  } else {
    // Unconstrained (or equality-constrained) minimizer as a candidate.
    Vec g0 = prob.f;
    Vec cand, lam0;
    if (me > 0) {
      if (!detail::kkt_solve(prob.H, prob.A_eq, g0, prob.b_eq, &cand, &lam0))
        throw Infeasible("qp_solve: equality constraints are rank deficient/inconsistent");
    } else {
      Eigen::LLT<Mat> llt(prob.H);
      cand = llt.solve(-prob.f);
    }
    if (feasible(cand)) {
      w = cand;
    } else if (mi == 0) {
      throw Infeasible("qp_solve: equality system has no solution");
    } else {
      // Phase I on (w, s): min 1^T s + del/2 (||w-anchor||^2 + ||s||^2)
      //   s.t. A w - s <= b, -s <= 0, A_eq w = b_eq.
      // The linear term is an exact penalty (weight 1/del relative to the
      // quadratic), so s = 0 at the optimum whenever the constraints are
      // feasible within ~1/del of the anchor. Re-anchoring iterates a
      // proximal step on the L1 infeasibility, reaching distant feasible
      // regions; the slack stalls at a positive value only when the problem
      // is genuinely infeasible.
      QpProblem ph;
      ph.A_ineq = Mat::Zero(2 * mi, n + mi);
      ph.b_ineq = Vec::Zero(2 * mi);
      ph.A_ineq.topLeftCorner(mi, n) = prob.A_ineq;
      ph.A_ineq.topRightCorner(mi, mi) = -Mat::Identity(mi, mi);
      ph.b_ineq.head(mi) = prob.b_ineq;
      ph.A_ineq.bottomRightCorner(mi, mi) = -Mat::Identity(mi, mi);
      ph.A_eq = Mat::Zero(me, n + mi);
      if (me > 0) ph.A_eq.leftCols(n) = prob.A_eq;
      ph.b_eq = prob.b_eq;

      // Prox-point iteration on a polyhedral objective terminates finitely
      // when the constraints are feasible; when they are not, the multipliers
      // at a stalled round form a Farkas certificate (y >= 0, A^T y = 0,
      // b^T y < 0) and infeasibility is declared. Slow linear progress
      // (distant feasible set, glancing geometry) weakens the proximal pull.
      double del = 1e-4;
      Vec anchor = cand;
      double slack_norm = kInf;
      for (int round = 0; round < 60; ++round) {
        ph.H = del * Mat::Identity(n + mi, n + mi);
        ph.f = Vec::Zero(n + mi);
        ph.f.head(n) = -del * anchor;
        ph.f.tail(mi) = Vec::Ones(mi);
        Vec z0(n + mi);
        z0.head(n) = anchor;
        for (int i = 0; i < mi; ++i)
          z0[n + i] = std::max(prob.A_ineq.row(i).dot(anchor) - prob.b_ineq[i], 0.0) + 1.0;
        QpSolution ph_sol = qp_solve(ph, z0);
        double s_now = ph_sol.w.tail(mi).lpNorm<Eigen::Infinity>();
        anchor = ph_sol.w.head(n);
        double prev = slack_norm;
        slack_norm = s_now;
        if (s_now <= 1e-9) break;
        if (s_now > 0.5 * prev) del = std::max(del * 1e-2, 1e-8);
        Vec lam = ph_sol.ineq_multipliers.head(mi);
        Vec cert = prob.A_ineq.transpose() * lam;
        double val = prob.b_ineq.dot(lam);
        if (me > 0) {
          cert += prob.A_eq.transpose() * ph_sol.eq_multipliers;
          val += prob.b_eq.dot(ph_sol.eq_multipliers);
        }
        double scale = lam.lpNorm<Eigen::Infinity>() +
                       (me > 0 ? ph_sol.eq_multipliers.lpNorm<Eigen::Infinity>() : 0.0);
        if (scale > 1e-12 && cert.norm() <= 1e-7 * scale && val < -1e-9 * scale)
          throw Infeasible("qp_solve: constraints are infeasible (Farkas certificate)");
      }
      if (slack_norm > 1e-9)
        throw Infeasible("qp_solve: constraints are infeasible (Phase I stalled)");
      w = anchor;
    }
  }

  // Working set: active inequality rows, kept linearly independent.
  std::vector<int> work;
  auto in_work = [&](int i) { return std::find(work.begin(), work.end(), i) != work.end(); };
  auto build_C = [&]() {
    Mat C(me + static_cast<int>(work.size()), n);
    for (int j = 0; j < me; ++j) C.row(j) = prob.A_eq.row(j);
    for (size_t k = 0; k < work.size(); ++k) C.row(me + static_cast<int>(k)) = prob.A_ineq.row(work[k]);
    return C;
  };
  for (int i = 0; i < mi; ++i) {
    double resid = prob.A_ineq.row(i).dot(w) - prob.b_ineq[i];
    if (resid >= -kActivityTol * (1.0 + std::abs(prob.b_ineq[i]))) {
      Mat C = build_C();
      if (!detail::row_dependent(C, prob.A_ineq.row(i).transpose())) work.push_back(i);
    }
  }

  const int max_iter = 200 + 50 * (n + mi + me);
  QpSolution sol;
  for (int iter = 0; iter < max_iter; ++iter) {
    Mat C = build_C();
    Vec g = prob.H * w + prob.f;
    Vec p, lam;
    if (!detail::kkt_solve(prob.H, C, g, Vec::Zero(C.rows()), &p, &lam))
      throw Error("qp_solve: singular KKT system (dependent working set)");

    // p below the noise floor of the KKT solve counts as a zero step.
    if (p.norm() <= 1e-9 * (1.0 + w.norm()) + 1e-13 * g.norm()) {
      // Check multiplier signs on inequality rows; Bland drop rule.
      int drop = -1;
      for (size_t k = 0; k < work.size(); ++k) {
        if (lam[me + static_cast<int>(k)] < -1e-10) {
          if (drop < 0 || work[k] < work[static_cast<size_t>(drop)]) drop = static_cast<int>(k);
        }
      }
      if (drop < 0) {
        sol.w = w;
        sol.iterations = iter + 1;
        sol.ineq_multipliers = Vec::Zero(mi);
        for (size_t k = 0; k < work.size(); ++k)
          sol.ineq_multipliers[work[k]] = std::max(lam[me + static_cast<int>(k)], 0.0);
        sol.eq_multipliers = lam.head(me);
        sol.active_set = work;
        std::sort(sol.active_set.begin(), sol.active_set.end());
        return sol;
      }
      work.erase(work.begin() + drop);
      continue;
    }

    // Step length to the nearest blocking constraint (lowest index on ties).
    double alpha = 1.0;
    int blocker = -1;
    for (int i = 0; i < mi; ++i) {
      if (in_work(i)) continue;
      double d = prob.A_ineq.row(i).dot(p);
      if (d > 1e-12) {
        double ai = (prob.b_ineq[i] - prob.A_ineq.row(i).dot(w)) / d;
        ai = std::max(ai, 0.0);
        if (ai < alpha - 1e-15) {
          alpha = ai;
          blocker = i;
        }
      }
    }
    w += alpha * p;
    if (blocker >= 0) {
      Mat C2 = build_C();
      if (!detail::row_dependent(C2, prob.A_ineq.row(blocker).transpose())) work.push_back(blocker);
    }
  }
  throw MaxIterations("qp_solve: active-set iteration limit reached");
}

// ---------------------------------------------------------------------------
// ConvexSet: Box | Polyhedron(Ax <= b) | NonnegOrthant | Intersection.

class ConvexSet {
 public:
  enum class Kind { Box, Polyhedron, NonnegOrthant, Intersection };

  static ConvexSet box(Vec lower, Vec upper) {
    require_dims(lower.size() == upper.size(), "ConvexSet::box: bound dims");
    for (int i = 0; i < lower.size(); ++i)
      require(lower[i] <= upper[i], "ConvexSet::box: lower > upper");
    ConvexSet s;
    s.kind_ = Kind::Box;
    s.dim_ = static_cast<int>(lower.size());
    s.lower_ = std::move(lower);
    s.upper_ = std::move(upper);
    s.build_rows();
    return s;
  }

  static ConvexSet polyhedron(Mat A, Vec b) {
    require_dims(A.rows() == b.size(), "ConvexSet::polyhedron: A rows != b length");
    ConvexSet s;
    s.kind_ = Kind::Polyhedron;
    s.dim_ = static_cast<int>(A.cols());
    s.A_ = std::move(A);
    s.b_ = std::move(b);
    return s;
  }

  static ConvexSet nonneg_orthant(int dim) {
    ConvexSet s;
    s.kind_ = Kind::NonnegOrthant;
    s.dim_ = dim;
    s.build_rows();
    return s;
  }

  static ConvexSet whole_space(int dim) { return polyhedron(Mat::Zero(0, dim), Vec::Zero(0)); }

  static ConvexSet intersection(std::vector<ConvexSet> parts) {
    require(!parts.empty(), "ConvexSet::intersection: empty list");
    ConvexSet s;
    s.kind_ = Kind::Intersection;
    s.dim_ = parts.front().dim();
    for (const auto& p : parts) require_dims(p.dim() == s.dim_, "ConvexSet::intersection: mixed dims");
    int rows = 0;
    for (const auto& p : parts) rows += static_cast<int>(p.rows_A().rows());
    s.A_ = Mat::Zero(rows, s.dim_);
    s.b_ = Vec::Zero(rows);
    int at = 0;
    for (const auto& p : parts) {
      int r = static_cast<int>(p.rows_A().rows());
      s.A_.middleRows(at, r) = p.rows_A();
      s.b_.segment(at, r) = p.rows_b();
      at += r;
    }
    s.parts_ = std::make_shared<std::vector<ConvexSet>>(std::move(parts));
    return s;
  }

  Kind kind() const { return kind_; }
  int dim() const { return dim_; }
  const Vec& lower() const { return lower_; }
  const Vec& upper() const { return upper_; }

  // Polyhedral representation A x <= b (infinite box bounds are skipped).
  const Mat& rows_A() const { return A_; }
  const Vec& rows_b() const { return b_; }

  double max_violation(const Vec& x) const {
    require_dims(x.size() == dim_, "ConvexSet: point dim");
    double v = 0.0;
    for (int i = 0; i < A_.rows(); ++i) v = std::max(v, A_.row(i).dot(x) - b_[i]);
    return v;
  }

  bool contains(const Vec& x, double tol = kMembershipTol) const { return max_violation(x) <= tol; }

 private:
  void build_rows() {
    if (kind_ == Kind::Box) {
      std::vector<int> up, lo;
      for (int i = 0; i < dim_; ++i) {
        if (std::isfinite(upper_[i])) up.push_back(i);
        if (std::isfinite(lower_[i])) lo.push_back(i);
      }
      A_ = Mat::Zero(static_cast<int>(up.size() + lo.size()), dim_);
      b_ = Vec::Zero(A_.rows());
      int r = 0;
      for (int i : up) {
        A_(r, i) = 1.0;
        b_[r] = upper_[i];
        ++r;
      }
      for (int i : lo) {
        A_(r, i) = -1.0;
        b_[r] = -lower_[i];
        ++r;
      }
    } else if (kind_ == Kind::NonnegOrthant) {
      A_ = -Mat::Identity(dim_, dim_);
      b_ = Vec::Zero(dim_);
    }
  }

  Kind kind_ = Kind::Polyhedron;
  int dim_ = 0;
  Vec lower_, upper_;
  Mat A_{0, 0};
  Vec b_{0};
  std::shared_ptr<std::vector<ConvexSet>> parts_;
};

// Euclidean minimum-norm projection onto the set.
inline Vec project_point(const ConvexSet& set, const Vec& y) {
  require_dims(y.size() == set.dim(), "project_point: point dim");
  switch (set.kind()) {
    case ConvexSet::Kind::Box:
      return y.cwiseMax(set.lower()).cwiseMin(set.upper());
    case ConvexSet::Kind::NonnegOrthant:
      return y.cwiseMax(0.0);
    default: {
      if (set.contains(y, 0.0)) return y;
      QpProblem p = QpProblem::unconstrained(Mat::Identity(y.size(), y.size()), -y);
      p.A_ineq = set.rows_A();
      p.b_ineq = set.rows_b();
      return qp_solve(p).w;
    }
  }
}

// Tangent cone of the set at x as a polyhedral cone {w : A_act w <= 0}.
// Rows active within the relative activity tolerance are collected; pinned box
// coordinates contribute both signs and hence an implied equality.
inline ConvexSet tangent_cone(const ConvexSet& set, const Vec& x, double tol = kMembershipTol) {
  require_dims(x.size() == set.dim(), "tangent_cone: point dim");
  if (set.max_violation(x) > tol)
    throw NotInSet("tangent_cone: point is not in the set (violation " +
                   std::to_string(set.max_violation(x)) + ")");
  const Mat& A = set.rows_A();
  const Vec& b = set.rows_b();
  std::vector<int> act;
  for (int i = 0; i < A.rows(); ++i)
    if (A.row(i).dot(x) - b[i] >= -kActivityTol * (1.0 + std::abs(b[i]))) act.push_back(i);
  Mat Aact(static_cast<int>(act.size()), set.dim());
  for (size_t k = 0; k < act.size(); ++k) Aact.row(static_cast<int>(k)) = A.row(act[k]);
  return ConvexSet::polyhedron(Aact, Vec::Zero(static_cast<int>(act.size())));
}

// argmin over w in T_set(x) of (w - v)^T Q(x) (w - v).
inline Vec project_tangent(const ConvexSet& set, const Vec& x, const Vec& v,
                           const Metric& metric = Metric::identity()) {
  ConvexSet cone = tangent_cone(set, x);
  if (cone.rows_A().rows() == 0) return v;
  if ((cone.rows_A() * v).maxCoeff() <= 0.0) return v;  // already in the cone
  Mat Q = metric.eval(x);
  QpProblem p = QpProblem::unconstrained(Q, -(Q * v));
  p.A_ineq = cone.rows_A();
  p.b_ineq = cone.rows_b();
  return qp_solve(p, Vec::Zero(x.size())).w;
}

// Euclidean projection of v onto the nonnegative-orthant tangent cone at mu,
// evaluated componentwise (used for dual updates).
inline Vec project_orthant_tangent(const Vec& mu, const Vec& v, double tol = kMembershipTol) {
  Vec out = v;
  for (int i = 0; i < mu.size(); ++i) {
    if (mu[i] < -tol) throw NegativeDual("dual variable below the orthant");
    if (mu[i] <= tol && v[i] < 0.0) out[i] = 0.0;
  }
  return out;
}

}  // namespace fbopt::convex
