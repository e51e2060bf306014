#pragma once

// Error-preserving correction (EPC): lower the sensitivity of a CP model
// while keeping ||t - [[A, B, C]]||_F <= delta.
//
// With two factors fixed the sensitivity is sum_r w_r^2 ||a_r||^2 for the
// free factor, so each alternating step is a weighted minimum-norm
// regression under the residual bound. The substitution At = A diag(w),
// Zt = Z diag(1/w) turns it into the spherical QP in spherical_qp.hpp.

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stabletd/cpd.hpp"
#include "stabletd/error.hpp"
#include "stabletd/spherical_qp.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

enum class EpcWeights {
    // w_r^2 = K ||b_r||^2 + J ||c_r||^2 (and cyclic): exact minimization of
    // the closed-form sensitivity over one factor.
    sensitivity,
    // w_r^2 = ||b_r||^2 + ||c_r||^2: diagonal of B'B + C'C without the
    // dimension weights.
    unweighted,
};

struct EpcOptions {
    std::optional<double> delta;  // absolute bound; default: error of the input model
    Index max_sweeps = 100;
    double ss_tol = 1e-6;  // relative sensitivity change per sweep
    double qp_tol = 1e-10;
    EpcWeights weights = EpcWeights::sensitivity;
    bool rebalance = true;  // optimal per-component norm balancing between sweeps

    void validate() const {
        if (delta && !(*delta >= 0.0)) throw InvalidArgument("EpcOptions.delta must be >= 0");
        if (max_sweeps < 1) throw InvalidArgument("EpcOptions.max_sweeps must be >= 1");
        if (!(ss_tol > 0.0) || !(qp_tol > 0.0)) {
            throw InvalidArgument("EpcOptions tolerances must be > 0");
        }
    }
};

struct EpcTracePoint {
    Index sweep = 0;  // 0 = input model (after optional rebalancing)
    double error = 0.0;  // absolute Frobenius error
    double sensitivity = 0.0;
};

struct EpcResult {
    CPModel model;  // no lambda; column scaling as optimized
    double delta = 0.0;
    double error = 0.0;
    double sensitivity_before = 0.0;
    double sensitivity_after = 0.0;
    std::vector<EpcTracePoint> trace;
    Index rejected_updates = 0;
};

// Weighted bounded update for one factor:
//     min ||A diag(w)||_F^2  s.t.  ||K1 - A Z'||_F^2 <= delta^2.
inline Matrix factor_update_bounded(const Matrix& K1, const Matrix& Z, const Vector& w,
                                    double delta, double qp_tol = 1e-10) {
    if (w.size() != Z.cols()) throw InvalidArgument("factor_update_bounded: weight length mismatch");
    for (Index r = 0; r < w.size(); ++r) {
        if (!(w(r) > 0.0)) {
            throw InvalidArgument("factor_update_bounded: weights must be strictly positive");
        }
    }
    const Vector winv = w.cwiseInverse();
    const Matrix Zt = Z * winv.asDiagonal();
    const SphericalQpResult qp = spherical_qp(K1, Zt, delta, qp_tol);
    return qp.X * winv.asDiagonal();
}

namespace detail {

// Per-component scaling a_r*x, b_r*y, c_r*z with xyz = 1 that minimizes the
// closed-form sensitivity: K u + I v + J w with u = |a|^2|b|^2 etc. and
// uvw fixed is minimal when all three weighted terms are equal.
inline void rebalance_for_sensitivity(Matrix& A, Matrix& B, Matrix& C) {
    const auto I = static_cast<double>(A.rows());
    const auto J = static_cast<double>(B.rows());
    const auto K = static_cast<double>(C.rows());
    for (Index r = 0; r < A.cols(); ++r) {
        const double na = A.col(r).norm(), nb = B.col(r).norm(), nc = C.col(r).norm();
        if (na == 0.0 || nb == 0.0 || nc == 0.0) continue;
        const double p2 = na * na * nb * nb * nc * nc;
        const double cp = std::cbrt(p2);
        const double level = std::cbrt(K * I * J) * cp * cp;
        const double u = level / K;  // |a|^2 |b|^2
        const double v = level / I;  // |b|^2 |c|^2
        const double w = level / J;  // |a|^2 |c|^2
        const double a2 = std::sqrt(u * w / v);
        const double b2 = std::sqrt(u * v / w);
        const double c2 = std::sqrt(v * w / u);
        A.col(r) *= std::sqrt(a2) / na;
        B.col(r) *= std::sqrt(b2) / nb;
        C.col(r) *= std::sqrt(c2) / nc;
    }
}

inline Vector epc_weights(const Matrix& X, const Matrix& Y, double nx, double ny, EpcWeights kind) {
    // weights for updating the third factor; X, Y the fixed factors whose
    // coefficients are the extents of the *other* fixed mode.
    const Eigen::ArrayXd x2 = X.colwise().squaredNorm().transpose().array();
    const Eigen::ArrayXd y2 = Y.colwise().squaredNorm().transpose().array();
    if (kind == EpcWeights::unweighted) return (x2 + y2).sqrt().matrix();
    return (ny * x2 + nx * y2).sqrt().matrix();
}

inline double plain_sensitivity(const Matrix& A, const Matrix& B, const Matrix& C) {
    return sensitivity(CPModel{A, B, C, std::nullopt});
}

}  // namespace detail

// Alternating A -> B -> C sweeps of bounded updates. Every accepted update
// keeps the error within delta (+1e-8 ||t|| slack) and does not raise the
// sensitivity; an update failing either check is rejected and the previous
// factor kept.
inline EpcResult epc_correct(const DenseTensor& t, const CPModel& m, const EpcOptions& opts = {}) {
    require_order3(t, "epc_correct");
    opts.validate();
    if (m.dims() != t.shape()) {
        throw InvalidArgument("epc_correct: model dims " + shape_string(m.dims()) +
                              " do not match tensor " + shape_string(t.shape()));
    }
    CPModel p = absorb_weights(m);
    Matrix A = p.A, B = p.B, C = p.C;
    const double I = static_cast<double>(A.rows());
    const double J = static_cast<double>(B.rows());
    const double K = static_cast<double>(C.rows());
    const double nt = t.norm();
    const double slack = 1e-8 * nt;

    EpcResult res;
    res.sensitivity_before = detail::plain_sensitivity(A, B, C);
    const double err0 = distance(t, reconstruct_cp(A, B, C));
    res.delta = opts.delta.value_or(err0);
    const double delta = res.delta;

    const Matrix K0 = unfold(t, 0), K1 = unfold(t, 1), K2 = unfold(t, 2);

    if (opts.rebalance) detail::rebalance_for_sensitivity(A, B, C);
    double ss = detail::plain_sensitivity(A, B, C);
    double err = distance(t, reconstruct_cp(A, B, C));
    res.trace.push_back({0, err, ss});

    auto try_update = [&](Matrix& target, const Matrix& unf, const Matrix& Z, const Vector& w,
                          const char* name) {
        Vector ws = w;
        for (Index r = 0; r < ws.size(); ++r) {
            if (!(ws(r) > 0.0)) ws(r) = 1.0;  // fixed columns are zero; Z column vanishes too
        }
        Matrix next;
        try {
            next = factor_update_bounded(unf, Z, ws, delta, opts.qp_tol);
        } catch (const InfeasibleBound& e) {
            std::ostringstream os;
            os << "epc_correct: bound delta=" << delta << " infeasible when updating factor "
               << name << "; minimum residual " << e.min_residual();
            throw InfeasibleBound(os.str(), e.min_residual());
        }
        Matrix saved = std::move(target);
        target = std::move(next);
        const double new_ss = detail::plain_sensitivity(A, B, C);
        const double new_err = distance(t, reconstruct_cp(A, B, C));
        const bool was_feasible = err <= delta + slack;
        if (new_err <= delta + slack && (new_ss <= ss || !was_feasible)) {
            ss = new_ss;
            err = new_err;
        } else {
            target = std::move(saved);
            ++res.rejected_updates;
        }
    };

    for (Index sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
        const double ss_start = ss;
        try_update(A, K0, khatri_rao(C, B), detail::epc_weights(B, C, J, K, opts.weights), "A");
        try_update(B, K1, khatri_rao(C, A), detail::epc_weights(A, C, I, K, opts.weights), "B");
        try_update(C, K2, khatri_rao(B, A), detail::epc_weights(A, B, I, J, opts.weights), "C");
        if (opts.rebalance) {
            Matrix a = A, b = B, c = C;
            detail::rebalance_for_sensitivity(a, b, c);
            const double rb_ss = detail::plain_sensitivity(a, b, c);
            const double rb_err = distance(t, reconstruct_cp(a, b, c));
            if (rb_ss <= ss && rb_err <= delta + slack) {
                A = std::move(a);
                B = std::move(b);
                C = std::move(c);
                ss = rb_ss;
                err = rb_err;
            }
        }
        res.trace.push_back({sweep, err, ss});
        if (ss_start - ss <= opts.ss_tol * std::max(ss_start, std::numeric_limits<double>::min())) {
            break;
        }
    }

    res.model = CPModel{A, B, C, std::nullopt};
    res.error = err;
    res.sensitivity_after = ss;
    return res;
}

}  // namespace stabletd
