#pragma once

// Closed-loop stability tooling: the singular-perturbation gain bound
// eps* = gamma / (omega L) from a boundary-layer Lyapunov certificate, and
// verification of the sector-IQC linear matrix inequality for a given P.

#include <cmath>
#include <random>
#include <utility>

#include "fbopt/core.hpp"

namespace fbopt::stability {

// Constants of a boundary-layer Lyapunov function W for the fast plant:
//   dW/dt (zeta - h^(u)) <= -gamma ||zeta - h^(u)||^2
//   ||grad_u W (zeta - h^(u))|| <= omega ||zeta - h^(u)||
// together with the Lipschitz constant L of the reduced-cost gradient.
struct BoundaryLayerCert {
  double gamma = 0.0;
  double omega = 0.0;
  double L = 0.0;

  void validate() const {
    require(gamma > 0 && omega > 0 && L > 0, "BoundaryLayerCert: constants must be positive");
  }
};

inline double epsilon_star(const BoundaryLayerCert& cert) {
  cert.validate();
  return cert.gamma / (cert.omega * cert.L);
}

// Solves A^T P + P A = -I for symmetric P (dense Kronecker solve).
inline Mat lyapunov_identity(const Mat& A) {
  const int n = static_cast<int>(A.rows());
  require_dims(A.cols() == n, "lyapunov_identity: A must be square");
  Mat K = Mat::Zero(n * n, n * n);
  // vec(A^T P + P A) = (I kron A^T + A^T kron I) vec(P)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        K(i + n * j, k + n * j) += A(k, i);  // (A^T P)_{ij} = sum_k A_ki P_kj
        K(i + n * j, i + n * k) += A(k, j);  // (P A)_{ij}   = sum_k P_ik A_kj
      }
  Vec rhs = Vec::Zero(n * n);
  for (int i = 0; i < n; ++i) rhs[i + n * i] = -1.0;
  Eigen::FullPivLU<Mat> lu(K);
  if (!lu.isInvertible()) throw SingularMatrix("lyapunov_identity: Lyapunov operator singular");
  Vec p = lu.solve(rhs);
  Mat P(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) P(i, j) = p[i + n * j];
  return 0.5 * (P + P.transpose());
}

inline void require_hurwitz(const Mat& A, const char* who) {
  Eigen::EigenSolver<Mat> es(A);
  for (int i = 0; i < A.rows(); ++i)
    if (es.eigenvalues()[i].real() >= -1e-9)
      throw NotHurwitz(std::string(who) + ": matrix is not Hurwitz (Re lambda = " +
                       std::to_string(es.eigenvalues()[i].real()) + ")");
}

// Converse-Lyapunov construction for an LTI boundary layer zdot = A z with
// steady-state state map h^(u) = -A^{-1}B u. With P solving A^T P + PA = -I
// and the normalization W(z) = z^T P z / (2 lmax(P)):
//   gamma = 1 / (2 lmax(P)),   omega = ||A^{-1}B||_2.
// lip_grad_phi is the Lipschitz constant of the reduced-cost gradient over
// the operating region.
inline BoundaryLayerCert lti_boundary_layer_cert(const Mat& A, const Mat& B,
                                                 double lip_grad_phi) {
  require_hurwitz(A, "lti_boundary_layer_cert");
  require(lip_grad_phi > 0, "lti_boundary_layer_cert: L must be positive");
  Mat P = lyapunov_identity(A);
  Eigen::SelfAdjointEigenSolver<Mat> es(P, Eigen::EigenvaluesOnly);
  double lmax = es.eigenvalues().maxCoeff();
  Mat hgrad = -Eigen::FullPivLU<Mat>(A).solve(B);
  BoundaryLayerCert cert;
  cert.gamma = 1.0 / (2.0 * lmax);
  cert.omega = hgrad.operatorNorm();
  cert.L = lip_grad_phi;
  cert.validate();
  return cert;
}

// ---------------------------------------------------------------------------
// Sector-IQC LMI verification.

// Interconnection z' = A z + B u, y = C z + const, u = eps * grad Phi(y) with
// grad Phi in the sector [m, L]. P is the candidate Lyapunov matrix.
struct IqcData {
  Mat A;  // n x n stacked loop matrix
  Mat B;  // n x q input matrix of the nonlinearity channel
  Mat C;  // q x n output map feeding the nonlinearity
  double m = 0.0;
  double L = 0.0;
  double epsilon = 0.0;
  Mat P;  // n x n symmetric PSD candidate

  void validate() const {
    const int n = static_cast<int>(A.rows());
    const int q = static_cast<int>(C.rows());
    require_dims(A.cols() == n, "IqcData: A square");
    require_dims(B.rows() == n && B.cols() == q, "IqcData: B is n x q");
    require_dims(C.cols() == n, "IqcData: C is q x n");
    require_dims(P.rows() == n && P.cols() == n, "IqcData: P is n x n");
    require(m <= L, "IqcData: sector needs m <= L");
    if ((P - P.transpose()).norm() > 1e-10 * (1.0 + P.norm()))
      throw Error("IqcData: P must be symmetric");
  }
};

// Sector quadratic form on the channel pair (y - y*, u - u*):
//   Xi = [ -2 eps^2 m L I   eps (L + m) I ]
//        [  eps (L + m) I   -2 I          ]
inline Mat sector_iqc_matrix(double m, double L, double eps, int q) {
  Mat Xi = Mat::Zero(2 * q, 2 * q);
  Xi.topLeftCorner(q, q) = -2.0 * eps * eps * m * L * Mat::Identity(q, q);
  Xi.topRightCorner(q, q) = eps * (L + m) * Mat::Identity(q, q);
  Xi.bottomLeftCorner(q, q) = eps * (L + m) * Mat::Identity(q, q);
  Xi.bottomRightCorner(q, q) = -2.0 * Mat::Identity(q, q);
  return Xi;
}

struct LmiResult {
  bool certified = false;
  double max_eigenvalue = 0.0;
};

// Checks [A^T P + P A, P B; B^T P, 0] + E^T Xi_eps E < 0 (strict, tol 1e-9)
// with E = blkdiag(C, I_q) mapping (z, u) to the IQC channel (y, u).
inline LmiResult verify_lmi(const IqcData& data) {
  data.validate();
  const int n = static_cast<int>(data.A.rows());
  const int q = static_cast<int>(data.C.rows());
  Mat M = Mat::Zero(n + q, n + q);
  M.topLeftCorner(n, n) = data.A.transpose() * data.P + data.P * data.A;
  M.topRightCorner(n, q) = data.P * data.B;
  M.bottomLeftCorner(q, n) = data.B.transpose() * data.P;
  Mat E = Mat::Zero(2 * q, n + q);
  E.topLeftCorner(q, n) = data.C;
  E.bottomRightCorner(q, q) = Mat::Identity(q, q);
  M += E.transpose() * sector_iqc_matrix(data.m, data.L, data.epsilon, q) * E;
  M = 0.5 * (M + M.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(M, Eigen::EigenvaluesOnly);
  LmiResult res;
  res.max_eigenvalue = es.eigenvalues().maxCoeff();
  res.certified = res.max_eigenvalue <= -1e-9;
  return res;
}

// Stacked loop matrices for the feedback gradient flow
//   zeta' = A zeta + B u_plant,  u' = -eps H^T grad Phi(y),  y = C zeta + d:
//   z = (zeta, u),  z' = bA z + bB (eps grad Phi(y)),  y = bC z.
struct StackedLoop {
  Mat A;
  Mat B;
  Mat C;
};

inline StackedLoop stack_gradient_loop(const Mat& A, const Mat& B, const Mat& C) {
  const int s = static_cast<int>(A.rows());
  const int p = static_cast<int>(B.cols());
  const int q = static_cast<int>(C.rows());
  Mat H = -C * Eigen::FullPivLU<Mat>(A).solve(B);  // steady-state sensitivity
  StackedLoop st;
  st.A = Mat::Zero(s + p, s + p);
  st.A.topLeftCorner(s, s) = A;
  st.A.topRightCorner(s, p) = B;
  st.B = Mat::Zero(s + p, q);
  st.B.bottomRows(p) = -H.transpose();
  st.C = Mat::Zero(q, s + p);
  st.C.leftCols(s) = C;
  return st;
}

// Heuristic search for a certifying P: the Lyapunov solution of the
// mid-sector linearized loop first, then random P = M M^T + delta I samples.
// Desk-scale helper, not a synthesis procedure.
inline std::pair<LmiResult, Mat> search_certificate(IqcData data, int trials = 200,
                                                    unsigned seed = 0) {
  const int n = static_cast<int>(data.A.rows());
  LmiResult best;
  best.max_eigenvalue = kInf;
  Mat best_P = Mat::Identity(n, n);
  auto consider = [&](const Mat& P) {
    data.P = 0.5 * (P + P.transpose());
    LmiResult r = verify_lmi(data);
    if (r.max_eigenvalue < best.max_eigenvalue) {
      best = r;
      best_P = data.P;
    }
    return r.certified;
  };
  // mid-sector linearization candidate
  double mid = 0.5 * (data.m + data.L) * data.epsilon;
  Mat Acl = data.A + data.B * (mid * data.C);
  Eigen::EigenSolver<Mat> es(Acl);
  bool hurwitz = true;
  for (int i = 0; i < n; ++i)
    if (es.eigenvalues()[i].real() >= -1e-12) hurwitz = false;
  if (hurwitz) {
    Mat Pcl = lyapunov_identity(Acl);
    // Schur complement of the assembled LMI with P = tau Pcl is
    // -tau I + tau^2/2 P B B^T P (+ sector slack), so tau ~ 1/||B^T P||^2.
    double tau = 1.0 / std::max((data.B.transpose() * Pcl).squaredNorm(), 1e-12);
    for (double scale : {1.0, 0.3, 3.0, 0.1, 0.03, 0.01}) {
      if (consider(scale * tau * Pcl)) return {best, best_P};
    }
  }
  if (consider(Mat::Identity(n, n))) return {best, best_P};
  std::mt19937 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 0; t < trials; ++t) {
    Mat M(n, n);
    for (int i = 0; i < n * n; ++i) M(i / n, i % n) = gauss(rng);
    if (consider(M * M.transpose() + 1e-3 * Mat::Identity(n, n))) return {best, best_P};
  }
  return {best, best_P};
}

}  // namespace fbopt::stability
