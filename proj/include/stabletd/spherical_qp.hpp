#pragma once

// Minimum-norm regression with a residual-ball constraint:
//
//     min ||X||_F^2   s.t.   ||Y - X Zt'||_F^2 <= delta^2
//
// Stationary points of the Lagrangian are X(mu) = mu Y Zt (I + mu Zt'Zt)^-1.
// With Zt'Zt = Q diag(lambda) Q' and F = Y Zt Q the residual becomes the
// secular function
//
//     res(mu) = res_ls + sum_k (||f_k||^2 / lambda_k) / (1 + mu lambda_k)^2,
//
// strictly decreasing and convex in mu >= 0, so the multiplier is found by a
// bracketed Newton iteration with bisection fallback.

#include <cmath>
#include <limits>
#include <sstream>

#include "stabletd/error.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

struct SphericalQpResult {
    Matrix X;
    // Lagrange multiplier. 0 when the origin is feasible; +inf when the bound
    // equals the least-squares residual (minimum-norm LS solution returned).
    double mu = 0.0;
    double residual = 0.0;  // ||Y - X Zt'||_F^2, evaluated directly
    double min_residual = 0.0;  // least-squares residual (squared)
    int iterations = 0;
};

namespace detail {

class SecularFunction {
public:
    SecularFunction(Eigen::VectorXd g, Eigen::VectorXd lambda, double res_ls)
        : g_(std::move(g)), lambda_(std::move(lambda)), res_ls_(res_ls) {}

    double value(double mu) const {
        double s = res_ls_;
        for (Index k = 0; k < g_.size(); ++k) {
            const double d = 1.0 + mu * lambda_(k);
            s += g_(k) / (d * d);
        }
        return s;
    }

    double derivative(double mu) const {
        double s = 0.0;
        for (Index k = 0; k < g_.size(); ++k) {
            const double d = 1.0 + mu * lambda_(k);
            s -= 2.0 * g_(k) * lambda_(k) / (d * d * d);
        }
        return s;
    }

private:
    Eigen::VectorXd g_;
    Eigen::VectorXd lambda_;
    double res_ls_;
};

}  // namespace detail

// Solves the problem above. qp_tol is relative: the active constraint is met
// to |res - delta^2| <= qp_tol * delta^2, and the bound counts as infeasible
// only when the least-squares residual exceeds (delta + qp_tol ||Y||)^2.
inline SphericalQpResult spherical_qp(const Matrix& Y, const Matrix& Zt, double delta,
                                      double qp_tol = 1e-10, int max_iters = 200) {
    if (Y.cols() != Zt.rows()) {
        throw InvalidArgument("spherical_qp: Y has " + std::to_string(Y.cols()) +
                              " columns but Zt has " + std::to_string(Zt.rows()) + " rows");
    }
    if (!(delta >= 0.0)) throw InvalidArgument("spherical_qp: delta must be >= 0");
    if (!(qp_tol > 0.0)) throw InvalidArgument("spherical_qp: qp_tol must be > 0");

    const Index R = Zt.cols();
    const double yy = Y.squaredNorm();
    const double d2 = delta * delta;
    SphericalQpResult out;
    out.X = Matrix::Zero(Y.rows(), R);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(Zt.transpose() * Zt));
    const Eigen::VectorXd& ev = es.eigenvalues();
    const Eigen::MatrixXd& Q = es.eigenvectors();
    const double vmax = R ? std::max(ev.maxCoeff(), 0.0) : 0.0;
    const double cutoff = 1e-12 * vmax;

    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(R);
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(R);
    for (Index k = 0; k < R; ++k) {
        if (ev(k) > cutoff && ev(k) > 0.0) {
            lambda(k) = ev(k);
            inv(k) = 1.0 / ev(k);
        }
    }
    const Matrix F = Y * Zt * Q;  // m x R
    const Matrix Xls = F * inv.asDiagonal() * Q.transpose();
    const double res_ls = (Y - Xls * Zt.transpose()).squaredNorm();
    out.min_residual = res_ls;

    if (d2 >= yy) {  // origin feasible, mu = 0
        out.residual = yy;
        return out;
    }

    const double slack = delta + qp_tol * std::sqrt(yy);
    if (res_ls > slack * slack) {
        std::ostringstream os;
        os << "residual bound infeasible: least-squares residual " << std::sqrt(res_ls)
           << " exceeds delta " << delta;
        throw InfeasibleBound(os.str(), std::sqrt(res_ls));
    }
    if (res_ls >= d2 * (1.0 - qp_tol)) {
        out.X = Xls;
        out.mu = std::numeric_limits<double>::infinity();
        out.residual = res_ls;
        return out;
    }

    Eigen::VectorXd g(R);
    for (Index k = 0; k < R; ++k) g(k) = lambda(k) > 0.0 ? F.col(k).squaredNorm() / lambda(k) : 0.0;
    const detail::SecularFunction phi(g, lambda, res_ls);

    // bracket: phi(lo) > d2 >= phi(hi)
    double lo = 0.0;
    double hi = vmax > 0.0 ? 1.0 / vmax : 1.0;
    int it = 0;
    while (phi.value(hi) > d2) {
        lo = hi;
        hi *= 2.0;
        if (++it >= max_iters) {
            std::ostringstream os;
            os << "spherical_qp: failed to bracket multiplier, bracket [" << lo << ", " << hi << "]";
            throw ConvergenceError(os.str());
        }
    }

    double mu = lo;
    bool converged = false;
    for (; it < max_iters; ++it) {
        const double f = phi.value(mu) - d2;
        if (std::abs(f) <= qp_tol * d2) {
            converged = true;
            break;
        }
        if (f > 0.0) lo = mu; else hi = mu;
        const double df = phi.derivative(mu);
        double next = df < 0.0 ? mu - f / df : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) {
            mu = next;
            converged = true;
            break;
        }
        mu = next;
    }
    if (!converged) {
        std::ostringstream os;
        os << "spherical_qp: multiplier search did not converge in " << max_iters
           << " iterations, bracket [" << lo << ", " << hi << "]";
        throw ConvergenceError(os.str());
    }

    Eigen::VectorXd scale(R);
    for (Index k = 0; k < R; ++k) scale(k) = lambda(k) > 0.0 ? mu / (1.0 + mu * lambda(k)) : 0.0;
    out.X = F * scale.asDiagonal() * Q.transpose();
    out.mu = mu;
    out.residual = (Y - out.X * Zt.transpose()).squaredNorm();
    out.iterations = it;
    return out;
}

}  // namespace stabletd
