#pragma once

// CP decomposition by alternating least squares, plus the degeneracy
// diagnostics: intensity (sum of squared rank-1 norms) and sensitivity
// (expected squared reconstruction change under Gaussian factor noise).

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "stabletd/error.hpp"
#include "stabletd/random.hpp"
#include "stabletd/tensor.hpp"

namespace stabletd {

// Kruskal representation [[A, B, C]], optionally with per-component weights.
// When lambda is present the factor columns are unit norm and component r is
// lambda[r] * a_r o b_r o c_r.
struct CPModel {
    Matrix A;
    Matrix B;
    Matrix C;
    std::optional<Vector> lambda;

    Index rank() const noexcept { return A.cols(); }
    Shape dims() const { return {A.rows(), B.rows(), C.rows()}; }

    void validate() const {
        if (A.cols() != B.cols() || A.cols() != C.cols()) {
            throw InvalidArgument("CPModel factors have different column counts (" +
                                  std::to_string(A.cols()) + ", " + std::to_string(B.cols()) +
                                  ", " + std::to_string(C.cols()) + ")");
        }
        if (!lambda) return;
        if (lambda->size() != A.cols()) throw InvalidArgument("CPModel lambda has wrong length");
        for (const Matrix* f : {&A, &B, &C}) {
            for (Index r = 0; r < f->cols(); ++r) {
                if (std::abs(f->col(r).norm() - 1.0) > 1e-8) {
                    throw InvalidArgument("CPModel with lambda requires unit-norm factor columns");
                }
            }
        }
    }
};

// Same tensor, lambda folded into A.
inline CPModel absorb_weights(const CPModel& m) {
    m.validate();
    CPModel out{m.A, m.B, m.C, std::nullopt};
    if (m.lambda) out.A = m.A * m.lambda->asDiagonal();
    return out;
}

inline DenseTensor reconstruct(const CPModel& m) {
    const CPModel plain = absorb_weights(m);
    return reconstruct_cp(plain.A, plain.B, plain.C);
}

inline double relative_error(const DenseTensor& t, const CPModel& m) {
    const double nt = t.norm();
    const double err = distance(t, reconstruct(m));
    return nt > 0.0 ? err / nt : err;
}

// sn = sum_r ||a_r o b_r o c_r||_F^2
inline double intensity(const CPModel& m) {
    const CPModel p = absorb_weights(m);
    const Vector a = p.A.colwise().squaredNorm().transpose();
    const Vector b = p.B.colwise().squaredNorm().transpose();
    const Vector c = p.C.colwise().squaredNorm().transpose();
    return (a.array() * b.array() * c.array()).sum();
}

// Closed form
//   ss = K tr(A'A * B'B) + I tr(B'B * C'C) + J tr(A'A * C'C)
// with I, J, K the mode extents and * the Hadamard product. Only the Gram
// diagonals enter, so each trace is sum_r ||x_r||^2 ||y_r||^2.
inline double sensitivity(const CPModel& m) {
    const CPModel p = absorb_weights(m);
    const auto I = static_cast<double>(p.A.rows());
    const auto J = static_cast<double>(p.B.rows());
    const auto K = static_cast<double>(p.C.rows());
    const Eigen::ArrayXd a = p.A.colwise().squaredNorm().transpose().array();
    const Eigen::ArrayXd b = p.B.colwise().squaredNorm().transpose().array();
    const Eigen::ArrayXd c = p.C.colwise().squaredNorm().transpose().array();
    return K * (a * b).sum() + I * (b * c).sum() + J * (a * c).sum();
}

// Empirical E||T - [[A+dA, B+dB, C+dC]]||^2 / sigma^2 over `samples` draws of
// i.i.d. N(0, sigma^2) factor perturbations. The normalization is sigma^2
// (no extra 1/R): in the small-sigma limit this estimates sensitivity(m)
// exactly.
inline double monte_carlo_sensitivity(const CPModel& m, double sigma, Index samples,
                                      std::uint64_t seed) {
    if (!(sigma > 0.0)) throw InvalidArgument("monte_carlo_sensitivity: sigma must be > 0");
    if (samples < 1) throw InvalidArgument("monte_carlo_sensitivity: samples must be >= 1");
    const CPModel p = absorb_weights(m);
    const DenseTensor base = reconstruct_cp(p.A, p.B, p.C);
    Rng rng = make_rng(seed, 0x5e45);
    double acc = 0.0;
    for (Index n = 0; n < samples; ++n) {
        const Matrix dA = gaussian_matrix(p.A.rows(), p.A.cols(), rng, sigma);
        const Matrix dB = gaussian_matrix(p.B.rows(), p.B.cols(), rng, sigma);
        const Matrix dC = gaussian_matrix(p.C.rows(), p.C.cols(), rng, sigma);
        const double d = distance(base, reconstruct_cp(p.A + dA, p.B + dB, p.C + dC));
        acc += d * d;
    }
    return acc / (static_cast<double>(samples) * sigma * sigma);
}

// Unit-norm columns, magnitudes collected into lambda, components sorted by
// descending lambda. A component with an exactly zero column gets lambda 0
// and e1 in place of each zero column.
inline CPModel normalize(const CPModel& m) {
    m.validate();
    const Index R = m.rank();
    CPModel out{m.A, m.B, m.C, Vector::Zero(R)};
    for (Index r = 0; r < R; ++r) {
        double lam = m.lambda ? (*m.lambda)(r) : 1.0;
        for (Matrix* f : {&out.A, &out.B, &out.C}) {
            const double n = f->col(r).norm();
            if (n == 0.0) {
                lam = 0.0;
                f->col(r).setZero();
                f->coeffRef(0, r) = 1.0;
            } else {
                f->col(r) /= n;
                lam *= n;
            }
        }
        if (lam < 0.0) {
            out.A.col(r) *= -1.0;
            lam = -lam;
        }
        (*out.lambda)(r) = lam;
    }

    std::vector<Index> order(static_cast<std::size_t>(R));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index x, Index y) { return (*out.lambda)(x) > (*out.lambda)(y); });
    CPModel sorted{Matrix(out.A.rows(), R), Matrix(out.B.rows(), R), Matrix(out.C.rows(), R),
                   Vector(R)};
    for (Index r = 0; r < R; ++r) {
        const Index src = order[static_cast<std::size_t>(r)];
        sorted.A.col(r) = out.A.col(src);
        sorted.B.col(r) = out.B.col(src);
        sorted.C.col(r) = out.C.col(src);
        (*sorted.lambda)(r) = (*out.lambda)(src);
    }
    return sorted;
}

namespace detail {

// Pseudo-inverse of a symmetric PSD matrix through its eigendecomposition;
// eigenvalues below rel_cutoff * max eigenvalue are treated as zero.
inline Matrix pinv_sym(const Matrix& G, double rel_cutoff = 1e-12) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(G)};
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double vmax = ev.size() ? ev.cwiseAbs().maxCoeff() : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(ev.size());
    for (Index i = 0; i < ev.size(); ++i) {
        if (ev(i) > rel_cutoff * vmax && ev(i) > 0.0) inv(i) = 1.0 / ev(i);
    }
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

// Rescales each component so its three factor columns share one norm.
inline void equalize_column_norms(Matrix& A, Matrix& B, Matrix& C) {
    for (Index r = 0; r < A.cols(); ++r) {
        const double na = A.col(r).norm(), nb = B.col(r).norm(), nc = C.col(r).norm();
        if (na == 0.0 || nb == 0.0 || nc == 0.0) continue;
        const double g = std::cbrt(na * nb * nc);
        A.col(r) *= g / na;
        B.col(r) *= g / nb;
        C.col(r) *= g / nc;
    }
}

}  // namespace detail

enum class AlsInit { random, svd_leading };

struct AlsOptions {
    Index max_iters = 1000;
    double tol = 1e-8;  // stop when |delta rel_error| < tol
    AlsInit init = AlsInit::random;
    Index restarts = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_iters < 1) throw InvalidArgument("AlsOptions.max_iters must be >= 1");
        if (!(tol > 0.0)) throw InvalidArgument("AlsOptions.tol must be > 0");
        if (restarts < 1) throw InvalidArgument("AlsOptions.restarts must be >= 1");
    }
};

struct AlsResult {
    CPModel model;     // normalized form
    double rel_error = 0.0;
    std::vector<double> error_trace;  // rel_error after each sweep of the selected restart
    Index restart = 0;
};

namespace detail {

inline Matrix leading_left_singular(const Matrix& unf, Index R, Rng& rng) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(unf), Eigen::ComputeThinU);
    const Index k = std::min<Index>(R, svd.matrixU().cols());
    Matrix out = gaussian_matrix(unf.rows(), R, rng);
    out.leftCols(k) = svd.matrixU().leftCols(k);
    return out;
}

struct AlsRun {
    Matrix A, B, C;
    std::vector<double> trace;
};

inline AlsRun als_single(const DenseTensor& t, const Matrix& K0, const Matrix& K1,
                         const Matrix& K2, Index R, const AlsOptions& opts, Index restart) {
    Rng rng = make_rng(opts.seed, static_cast<std::uint64_t>(restart));
    const Index I = t.extent(0), J = t.extent(1), K = t.extent(2);
    AlsRun run;
    if (opts.init == AlsInit::svd_leading && restart == 0) {
        run.A = leading_left_singular(K0, R, rng);
        run.B = leading_left_singular(K1, R, rng);
        run.C = leading_left_singular(K2, R, rng);
    } else {
        run.A = gaussian_matrix(I, R, rng);
        run.B = gaussian_matrix(J, R, rng);
        run.C = gaussian_matrix(K, R, rng);
    }
    const double nt = t.norm();
    double prev = std::numeric_limits<double>::infinity();
    for (Index it = 0; it < opts.max_iters; ++it) {
        Matrix gram = (run.C.transpose() * run.C).cwiseProduct(run.B.transpose() * run.B);
        run.A = K0 * khatri_rao(run.C, run.B) * pinv_sym(gram);
        gram = (run.C.transpose() * run.C).cwiseProduct(run.A.transpose() * run.A);
        run.B = K1 * khatri_rao(run.C, run.A) * pinv_sym(gram);
        gram = (run.B.transpose() * run.B).cwiseProduct(run.A.transpose() * run.A);
        run.C = K2 * khatri_rao(run.B, run.A) * pinv_sym(gram);
        equalize_column_norms(run.A, run.B, run.C);

        const double err = distance(t, reconstruct_cp(run.A, run.B, run.C)) / nt;
        run.trace.push_back(err);
        if (std::abs(prev - err) < opts.tol) break;
        prev = err;
    }
    return run;
}

}  // namespace detail

// Best-of-restarts ALS. Each sweep solves A <- K_(1) Z (Z'Z)^+ with
// Z = C (kr) B, then the same for B and C. Restarts are ranked by final
// relative error; near-ties (1e-12) go to the lower sensitivity.
inline AlsResult cpd_als(const DenseTensor& t, Index R, const AlsOptions& opts = {}) {
    require_order3(t, "cpd_als");
    if (R < 1) throw InvalidArgument("cpd_als: rank must be >= 1");
    opts.validate();
    if (!t.all_finite()) throw InvalidArgument("cpd_als: tensor contains non-finite values");

    const Index I = t.extent(0), J = t.extent(1), K = t.extent(2);
    if (t.norm() == 0.0) {
        AlsResult zero;
        zero.model = normalize(CPModel{Matrix::Zero(I, R), Matrix::Zero(J, R), Matrix::Zero(K, R),
                                       std::nullopt});
        zero.error_trace = {0.0};
        return zero;
    }

    const Matrix K0 = unfold(t, 0), K1 = unfold(t, 1), K2 = unfold(t, 2);
    std::optional<AlsResult> best;
    double best_ss = 0.0;
    for (Index restart = 0; restart < opts.restarts; ++restart) {
        detail::AlsRun run = detail::als_single(t, K0, K1, K2, R, opts, restart);
        AlsResult cand;
        cand.model = normalize(CPModel{std::move(run.A), std::move(run.B), std::move(run.C),
                                       std::nullopt});
        cand.rel_error = run.trace.back();
        cand.error_trace = std::move(run.trace);
        cand.restart = restart;
        const double ss = sensitivity(cand.model);
        const bool better =
            !best || cand.rel_error < best->rel_error - 1e-12 ||
            (std::abs(cand.rel_error - best->rel_error) <= 1e-12 && ss < best_ss);
        if (better) {
            best = std::move(cand);
            best_ss = ss;
        }
    }
    return std::move(*best);
}

}  // namespace stabletd
