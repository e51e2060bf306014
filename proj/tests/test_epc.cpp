#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace stabletd;

namespace {

// ||Y - X Zt'||^2 at the Lagrangian stationary point for multiplier mu.
Matrix stationary_point(const Matrix& Y, const Matrix& Zt, double mu) {
    const Index R = Zt.cols();
    const Matrix M = Matrix::Identity(R, R) + mu * Zt.transpose() * Zt;
    return mu * Y * Zt * Eigen::MatrixXd(M).inverse();
}

double residual(const Matrix& Y, const Matrix& Zt, const Matrix& X) { return (Y - X * Zt.transpose()).squaredNorm(); }

void expect_trace_invariants(const EpcResult& r, double nt) {
    for (const auto& p : r.trace) EXPECT_LE(p.error, r.delta + 1e-8 * nt) << "sweep " << p.sweep;
    for (std::size_t n = 1; n < r.trace.size(); ++n) {
        EXPECT_LE(r.trace[n].sensitivity, r.trace[n - 1].sensitivity + 1e-10 * r.trace[n - 1].sensitivity)
            << "sweep " << n;
    }
}

}  // namespace

TEST(SphericalQp, OriginFeasible) {
    Rng rng = make_rng(30);
    const Matrix Y = gaussian_matrix(3, 5, rng), Zt = gaussian_matrix(5, 2, rng);
    const SphericalQpResult r = spherical_qp(Y, Zt, Y.norm() * 1.01);
    EXPECT_EQ(r.mu, 0.0);
    EXPECT_EQ(r.X.norm(), 0.0);
    EXPECT_NEAR(r.residual, Y.squaredNorm(), 1e-12 * Y.squaredNorm());
}

TEST(SphericalQp, OrthonormalInterpolation) {
    Rng rng = make_rng(31);
    const Matrix Zt = oracle::random_orthonormal(7, 3, rng);
    const Matrix Y = gaussian_matrix(4, 3, rng) * Zt.transpose();  // in range
    const SphericalQpResult r = spherical_qp(Y, Zt, 0.0);
    EXPECT_LE((r.X - Y * Zt).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SphericalQp, ResidualDecreasingInMu) {
    Rng rng = make_rng(32);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix Y = gaussian_matrix(4, 9, rng), Zt = gaussian_matrix(9, 3, rng);
        double prev = std::numeric_limits<double>::infinity();
        for (int k = 0; k < 10; ++k) {
            const double mu = 1e-3 * std::pow(3.0, k);
            const double res = residual(Y, Zt, stationary_point(Y, Zt, mu));
            EXPECT_LT(res, prev);
            prev = res;
        }
    }
}

TEST(SphericalQp, KktActiveConstraint) {
    Rng rng = make_rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix Y = gaussian_matrix(6, 12, rng), Zt = gaussian_matrix(12, 4, rng);
        const Matrix Xls = Y * Zt * (Zt.transpose() * Zt).inverse();
        const double lo = std::sqrt(residual(Y, Zt, Xls)), hi = Y.norm();
        const double delta = lo + (hi - lo) * (0.1 + 0.8 * trial / 20.0);
        const SphericalQpResult r = spherical_qp(Y, Zt, delta);
        ASSERT_GT(r.mu, 0.0);
        ASSERT_TRUE(std::isfinite(r.mu));
        EXPECT_LE((r.X - stationary_point(Y, Zt, r.mu)).norm(), 1e-8 * (1.0 + r.X.norm()));
        EXPECT_NEAR(r.residual, delta * delta, 1e-8 * delta * delta);
    }
}

TEST(SphericalQp, RankDeficientGram) {
    Rng rng = make_rng(34);
    Matrix Zt = gaussian_matrix(8, 3, rng);
    Zt.col(2) = Zt.col(0) + Zt.col(1);
    const Matrix Y = gaussian_matrix(2, 8, rng);
    // LS residual includes the part of Y outside range(Zt)
    const Matrix P = Zt.leftCols(2) * (Zt.leftCols(2).transpose() * Zt.leftCols(2)).inverse() *
                     Zt.leftCols(2).transpose();
    const double res_ls = (Y - Y * P).squaredNorm();
    const double delta = std::sqrt(0.5 * (res_ls + Y.squaredNorm()));
    const SphericalQpResult r = spherical_qp(Y, Zt, delta);
    EXPECT_NEAR(r.min_residual, res_ls, 1e-9 * Y.squaredNorm());
    EXPECT_NEAR(r.residual, delta * delta, 1e-8 * delta * delta);
    EXPECT_THROW(spherical_qp(Y, Zt, 0.5 * std::sqrt(res_ls)), InfeasibleBound);
}

TEST(SphericalQp, BoundAtLeastSquaresResidual) {
    Rng rng = make_rng(35);
    const Matrix Y = gaussian_matrix(3, 8, rng), Zt = gaussian_matrix(8, 3, rng);
    const Matrix Xls = Y * Zt * (Zt.transpose() * Zt).inverse();
    const SphericalQpResult r = spherical_qp(Y, Zt, std::sqrt(residual(Y, Zt, Xls)));
    EXPECT_LE((r.X - Xls).norm(), 1e-8 * Xls.norm());
}

TEST(SphericalQp, RejectsBadArguments) {
    EXPECT_THROW(spherical_qp(Matrix::Zero(2, 3), Matrix::Zero(4, 2), 1.0), InvalidArgument);
    EXPECT_THROW(spherical_qp(Matrix::Zero(2, 3), Matrix::Zero(3, 2), -1.0), InvalidArgument);
}

TEST(FactorUpdateBounded, ScalarGeometry) {
    Matrix K1(1, 1), Z(1, 1);
    K1 << 2.0;
    Z << 1.0;
    const Matrix A = factor_update_bounded(K1, Z, Vector::Ones(1), 1.0);
    EXPECT_NEAR(A(0, 0), 1.0, 1e-10);
}

TEST(FactorUpdateBounded, LargeBoundGivesZero) {
    Rng rng = make_rng(36);
    const Matrix K1 = gaussian_matrix(3, 6, rng), Z = gaussian_matrix(6, 2, rng);
    EXPECT_EQ(factor_update_bounded(K1, Z, Vector::Ones(2), K1.norm()).norm(), 0.0);
}

TEST(FactorUpdateBounded, KktOnRandomInstance) {
    Rng rng = make_rng(37);
    const Matrix K1 = gaussian_matrix(6, 12, rng), Z = gaussian_matrix(12, 4, rng);
    const Matrix Als = K1 * Z * (Z.transpose() * Z).inverse();
    const double lo = std::sqrt(residual(K1, Z, Als)), hi = K1.norm();
    const double delta = 0.5 * (lo + hi);
    const SphericalQpResult qp = spherical_qp(K1, Z, delta);
    const Matrix A = factor_update_bounded(K1, Z, Vector::Ones(4), delta);
    EXPECT_LE((A - stationary_point(K1, Z, qp.mu)).norm(), 1e-8 * A.norm());
    EXPECT_NEAR(residual(K1, Z, A), delta * delta, 1e-8 * delta * delta);
}

TEST(FactorUpdateBounded, WeightedMatchesDirectFormulation) {
    // Stationary point without the change of variables:
    //   A = K1 Z (Z'Z + diag(w)^2 / mu)^{-1}
    Rng rng = make_rng(38);
    const Matrix K1 = gaussian_matrix(5, 10, rng), Z = gaussian_matrix(10, 3, rng);
    Vector w(3);
    w << 0.5, 2.0, 3.0;
    const Matrix Zt = Z * w.cwiseInverse().asDiagonal();
    const Matrix Als = K1 * Z * (Z.transpose() * Z).inverse();
    const double delta = 0.5 * (std::sqrt(residual(K1, Z, Als)) + K1.norm());
    const SphericalQpResult qp = spherical_qp(K1, Zt, delta);
    const Matrix A = factor_update_bounded(K1, Z, w, delta);
    const Eigen::MatrixXd M = Z.transpose() * Z + Eigen::MatrixXd(w.cwiseAbs2().asDiagonal()) / qp.mu;
    const Matrix direct = K1 * Z * M.inverse();
    EXPECT_LE((A - direct).norm(), 1e-8 * (1.0 + A.norm()));
}

TEST(FactorUpdateBounded, Errors) {
    Rng rng = make_rng(39);
    const Matrix K1 = gaussian_matrix(3, 6, rng), Z = gaussian_matrix(6, 2, rng);
    Vector w = Vector::Ones(2);
    w(1) = 0.0;
    EXPECT_THROW(factor_update_bounded(K1, Z, w, 1.0), InvalidArgument);
    EXPECT_THROW(factor_update_bounded(K1, Z, Vector::Ones(3), 1.0), InvalidArgument);
    EXPECT_THROW(factor_update_bounded(K1, Z, Vector::Ones(2), 0.0), InfeasibleBound);
}

TEST(EpcCorrect, ExactModelZeroDelta) {
    Rng rng = make_rng(40);
    auto inst = oracle::random_cp(3, 4, 5, 2, rng);
    CPModel m{inst.A, inst.B, inst.C, std::nullopt};
    m.A *= 20.0;
    m.C /= 20.0;  // unbalanced norms, same tensor
    const double ss_in = sensitivity(m);
    const EpcResult r = epc_correct(inst.t, m, EpcOptions{.delta = 0.0});
    EXPECT_LT(r.sensitivity_after, ss_in);
    EXPECT_LE(r.error, 1e-8 * inst.t.norm());
    expect_trace_invariants(r, inst.t.norm());
}

TEST(EpcCorrect, DegenerateStartIsRepaired) {
    Rng rng = make_rng(41);
    const auto inst = oracle::degenerate_pair(5, 6, 7, 0.01, 100.0, rng);
    const double nt = inst.t.norm();
    const double err0 = distance(inst.t, reconstruct(inst.start));
    const double ss0 = sensitivity(inst.start);
    const EpcResult r = epc_correct(inst.t, inst.start);
    EXPECT_DOUBLE_EQ(r.delta, err0);
    EXPECT_LE(r.error, err0 + 1e-8 * nt);
    EXPECT_LE(r.sensitivity_after * 10.0, ss0);
    EXPECT_NEAR(r.sensitivity_after, sensitivity(r.model), 1e-9 * r.sensitivity_after);
    EXPECT_LE(intensity(r.model) * 10.0, intensity(inst.start));
    expect_trace_invariants(r, nt);
}

TEST(EpcCorrect, UnweightedFlagAlsoPreservesError) {
    Rng rng = make_rng(42);
    const auto inst = oracle::degenerate_pair(4, 5, 6, 0.01, 100.0, rng);
    EpcOptions o;
    o.weights = EpcWeights::unweighted;
    const EpcResult r = epc_correct(inst.t, inst.start, o);
    EXPECT_LE(r.error, r.delta + 1e-8 * inst.t.norm());
    EXPECT_LE(r.sensitivity_after, sensitivity(inst.start));
    expect_trace_invariants(r, inst.t.norm());
}

TEST(EpcCorrect, DeltaAboveNormReachesSmallModel) {
    Rng rng = make_rng(43);
    const DenseTensor t = gaussian_tensor({3, 4, 5}, rng);
    const AlsResult fit = cpd_als(t, 2);
    const EpcResult r = epc_correct(t, fit.model, EpcOptions{.delta = 1.01 * t.norm()});
    EXPECT_LE(r.sensitivity_after, sensitivity(fit.model));
    EXPECT_LE(r.error, r.delta + 1e-8 * t.norm());
    expect_trace_invariants(r, t.norm());
}

TEST(EpcCorrect, RandomAlsFitsNeverViolateBound) {
    Rng rng = make_rng(44);
    for (int trial = 0; trial < 6; ++trial) {
        const DenseTensor t = gaussian_tensor({4, 5, 6}, rng);
        const AlsResult fit = cpd_als(t, 4, AlsOptions{.seed = static_cast<std::uint64_t>(trial)});
        const double nt = t.norm();
        const EpcResult r = epc_correct(t, fit.model, EpcOptions{.delta = fit.rel_error * nt * 1.05});
        EXPECT_LE(r.error, r.delta + 1e-8 * nt);
        EXPECT_LE(r.sensitivity_after, sensitivity(fit.model) * (1.0 + 1e-10));
        EXPECT_NEAR(distance(t, reconstruct(r.model)), r.error, 1e-10 * nt);
        expect_trace_invariants(r, nt);
    }
}

TEST(EpcCorrect, InfeasibleBoundNamesFactor) {
    Rng rng = make_rng(45);
    const DenseTensor t = gaussian_tensor({4, 5, 6}, rng);
    const AlsResult fit = cpd_als(t, 1);
    try {
        epc_correct(t, fit.model, EpcOptions{.delta = 1e-3 * t.norm()});
        FAIL() << "expected InfeasibleBound";
    } catch (const InfeasibleBound& e) {
        EXPECT_NE(std::string(e.what()).find("factor A"), std::string::npos) << e.what();
        EXPECT_GT(e.min_residual(), 1e-3 * t.norm());
    }
}

TEST(EpcCorrect, RejectsMismatchAndBadOptions) {
    Rng rng = make_rng(46);
    const DenseTensor t = gaussian_tensor({3, 4, 5}, rng);
    const CPModel m{gaussian_matrix(3, 2, rng), gaussian_matrix(4, 2, rng), gaussian_matrix(6, 2, rng), std::nullopt};
    EXPECT_THROW(epc_correct(t, m), InvalidArgument);
    const AlsResult fit = cpd_als(t, 2);
    EXPECT_THROW(epc_correct(t, fit.model, EpcOptions{.delta = -1.0}), InvalidArgument);
    EXPECT_THROW(epc_correct(t, fit.model, EpcOptions{.max_sweeps = 0}), InvalidArgument);
}
