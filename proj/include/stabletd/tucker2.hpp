#pragma once

// Bound-constrained Tucker-2:  t ~ G x_1 U x_2 V  (modes 1 and 2 0-based,
// mode 0 untouched) with orthonormal U (S x R1), V (T x R2) and the smallest
// ranks meeting ||t - G x U x V||_F <= delta.
//
// For orthonormal factors ||t - G* x U x V||^2 = ||t||^2 - ||G*||^2 with
// G* = t x Uᵀ x Vᵀ, so each factor step keeps the fewest principal
// eigenvectors of a Gram matrix whose eigenvalue sum reaches ||t||^2 - delta^2.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <vector>

#include "stabletd/error.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

struct Tucker2Model {
    DenseTensor G;  // D^2 x R1 x R2
    Matrix U;       // S x R1
    Matrix V;       // T x R2

    Index r1() const noexcept { return U.cols(); }
    Index r2() const noexcept { return V.cols(); }
};

inline DenseTensor reconstruct(const Tucker2Model& m) {
    return mode_product(mode_product(m.G, m.U, 1), m.V, 2);
}

// R1 S + R2 T + R1 R2 D^2 for a D^2 x S x T kernel.
inline Index tucker2_cost(Index d2, Index S, Index T, Index r1, Index r2) {
    return r1 * S + r2 * T + r1 * r2 * d2;
}

namespace detail {

inline double orthonormality_defect(const Matrix& M) {
    if (M.cols() == 0) return 0.0;
    return (M.transpose() * M - Matrix::Identity(M.cols(), M.cols())).cwiseAbs().maxCoeff();
}

inline Matrix gram_rows(const Matrix& M) {
    Matrix Q = M * M.transpose();
    return 0.5 * (Q + Q.transpose());
}

}  // namespace detail

// Q1(i, j) = sum_r <K(:, i, :) v_r, K(:, j, :) v_r>, i.e. the mode-1 Gram
// matrix of t x_2 Vᵀ. With V square orthonormal, tr(Q1) = ||t||^2.
inline Matrix build_Q1(const DenseTensor& t, const Matrix& V) {
    require_order3(t, "build_Q1");
    if (V.rows() != t.extent(2)) throw InvalidArgument("build_Q1: V rows must equal extent of mode 2");
    return detail::gram_rows(unfold(mode_product(t, V.transpose(), 2), 1));
}

// Q2(i, j) = sum_r <K(:, :, i) u_r, K(:, :, j) u_r>.
inline Matrix build_Q2(const DenseTensor& t, const Matrix& U) {
    require_order3(t, "build_Q2");
    if (U.rows() != t.extent(1)) throw InvalidArgument("build_Q2: U rows must equal extent of mode 1");
    return detail::gram_rows(unfold(mode_product(t, U.transpose(), 1), 2));
}

struct EigenBasis {
    Matrix vectors;          // n x rank, principal first
    Index rank = 0;
    Eigen::VectorXd values;  // all eigenvalues, descending, clamped at 0
};

namespace detail {

inline EigenBasis sorted_eigen(const Matrix& Q) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(Q)};
    EigenBasis out;
    out.values = es.eigenvalues().reverse().cwiseMax(0.0);
    out.vectors = es.eigenvectors().rowwise().reverse();
    return out;
}

}  // namespace detail

// Smallest R with sum_{r<=R} lambda_r >= energy_bound, plus the top-R
// eigenvectors. Eigenvalues tied with the last kept one (relative 1e-12) are
// kept as a cluster. Partial sums carry a rounding slack of 64 eps tr(Q).
inline EigenBasis minimal_rank_eigvecs(const Matrix& Q, double energy_bound) {
    if (Q.rows() != Q.cols()) throw InvalidArgument("minimal_rank_eigvecs: Q must be square");
    const double trace = Q.trace();
    if (energy_bound > trace * (1.0 + 1e-10) + std::numeric_limits<double>::min()) {
        std::ostringstream os;
        os << "energy bound " << energy_bound << " exceeds total energy " << trace;
        throw InfeasibleBound(os.str(), std::sqrt(std::max(0.0, energy_bound - trace)));
    }
    EigenBasis eb = detail::sorted_eigen(Q);
    const Index n = Q.rows();
    Index rank = 0;
    if (energy_bound > 0.0) {
        const double slack = 64.0 * std::numeric_limits<double>::epsilon() * std::abs(trace);
        double partial = 0.0;
        rank = n;
        for (Index r = 0; r < n; ++r) {
            partial += eb.values(r);
            if (partial >= energy_bound - slack) {
                rank = r + 1;
                break;
            }
        }
        const double vmax = n ? eb.values(0) : 0.0;
        while (rank < n && rank > 0 && eb.values(rank - 1) - eb.values(rank) <= 1e-12 * vmax &&
               eb.values(rank) > 0.0) {
            ++rank;
        }
    }
    eb.rank = rank;
    eb.vectors = Matrix(eb.vectors.leftCols(rank));
    return eb;
}

inline EigenBasis top_eigvecs(const Matrix& Q, Index rank) {
    if (rank < 0 || rank > Q.rows()) throw InvalidArgument("top_eigvecs: rank out of range");
    EigenBasis eb = detail::sorted_eigen(Q);
    eb.rank = rank;
    eb.vectors = Matrix(eb.vectors.leftCols(rank));
    return eb;
}

// G* = t x_1 Uᵀ x_2 Vᵀ for orthonormal U, V.
inline DenseTensor core_closed_form(const DenseTensor& t, const Matrix& U, const Matrix& V) {
    require_order3(t, "core_closed_form");
    if (detail::orthonormality_defect(U) > 1e-6 || detail::orthonormality_defect(V) > 1e-6) {
        throw InvalidArgument("core_closed_form: U and V must have orthonormal columns");
    }
    return mode_product(mode_product(t, U.transpose(), 1), V.transpose(), 2);
}

struct Tucker2Options {
    Index max_alternations = 2;
    std::optional<Index> fixed_r1;
    std::optional<Index> fixed_r2;
    Index min_rank = 1;
};

struct Tucker2Step {
    char factor = 'U';
    Index r1 = 0;
    Index r2 = 0;
    double error = 0.0;  // Frobenius, evaluated directly
    Index cost = 0;
    // Energy captured by dropping the last kept eigenvector; < energy bound
    // for bound-selected steps (minimality witness).
    double energy_without_last = 0.0;
    double energy_bound = 0.0;
};

struct Tucker2Result {
    Tucker2Model model;
    double error = 0.0;
    double delta = 0.0;
    std::vector<Tucker2Step> trace;
};

// Alternates U- and V-steps starting from V = I_T. Ranks never grow across
// steps (the previous factor always meets the bound), so the cost objective
// is non-increasing. Stops after max_alternations or when ranks and
// subspaces repeat.
inline Tucker2Result tucker2_bounded(const DenseTensor& t, double delta, const Tucker2Options& opts = {}) {
    require_order3(t, "tucker2_bounded");
    if (!(delta >= 0.0)) throw InvalidArgument("tucker2_bounded: delta must be >= 0");
    if (opts.max_alternations < 1) throw InvalidArgument("tucker2_bounded: max_alternations must be >= 1");
    const Index D2 = t.extent(0), S = t.extent(1), T = t.extent(2);
    if (opts.fixed_r1 && (*opts.fixed_r1 < 1 || *opts.fixed_r1 > S)) {
        throw InvalidArgument("tucker2_bounded: fixed R1 out of range");
    }
    if (opts.fixed_r2 && (*opts.fixed_r2 < 1 || *opts.fixed_r2 > T)) {
        throw InvalidArgument("tucker2_bounded: fixed R2 out of range");
    }

    const double nt2 = t.norm() * t.norm();
    const double bound = nt2 - delta * delta;

    auto pick = [&](const Matrix& Q, const std::optional<Index>& fixed, Index n, Tucker2Step& step) {
        EigenBasis eb;
        if (fixed) {
            eb = top_eigvecs(Q, *fixed);
        } else {
            eb = minimal_rank_eigvecs(Q, std::min(bound, Q.trace()));
            if (eb.rank < std::min(opts.min_rank, n)) eb = top_eigvecs(Q, std::min(opts.min_rank, n));
        }
        step.energy_bound = bound;
        step.energy_without_last = eb.rank > 0 ? eb.values.head(eb.rank - 1).sum() : 0.0;
        return eb.vectors;
    };

    Tucker2Result res;
    res.delta = delta;
    Matrix U;
    Matrix V = Matrix::Identity(T, T);
    for (Index alt = 0; alt < opts.max_alternations; ++alt) {
        const Matrix U_prev = U, V_prev = V;

        Tucker2Step su;
        su.factor = 'U';
        U = pick(build_Q1(t, V), opts.fixed_r1, S, su);
        su.r1 = U.cols();
        su.r2 = V.cols();
        su.error = distance(t, reconstruct(Tucker2Model{core_closed_form(t, U, V), U, V}));
        su.cost = tucker2_cost(D2, S, T, su.r1, su.r2);
        res.trace.push_back(su);

        Tucker2Step sv;
        sv.factor = 'V';
        V = pick(build_Q2(t, U), opts.fixed_r2, T, sv);
        sv.r1 = U.cols();
        sv.r2 = V.cols();
        sv.error = distance(t, reconstruct(Tucker2Model{core_closed_form(t, U, V), U, V}));
        sv.cost = tucker2_cost(D2, S, T, sv.r1, sv.r2);
        res.trace.push_back(sv);

        const bool same_shape = U_prev.rows() == U.rows() && U_prev.cols() == U.cols() &&
                                V_prev.cols() == V.cols();
        if (same_shape && alt > 0) {
            const double du = (U_prev * U_prev.transpose() - U * U.transpose()).norm();
            const double dv = (V_prev * V_prev.transpose() - V * V.transpose()).norm();
            if (du < 1e-10 && dv < 1e-10) break;
        }
    }

    res.model = Tucker2Model{core_closed_form(t, U, V), U, V};
    res.error = distance(t, reconstruct(res.model));
    return res;
}

}  // namespace stabletd
