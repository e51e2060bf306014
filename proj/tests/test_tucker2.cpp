#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace stabletd;

namespace {

double defect(const Matrix& M) { return (M.transpose() * M - Matrix::Identity(M.cols(), M.cols())).cwiseAbs().maxCoeff(); }

// Bound-selected steps must be minimal: dropping the last kept eigenvector
// loses the energy bound.
void expect_minimal(const Tucker2Result& r) {
    for (const auto& s : r.trace) {
        const Index rank = s.factor == 'U' ? s.r1 : s.r2;
        if (rank > 1) EXPECT_LT(s.energy_without_last, s.energy_bound) << s.factor << " rank " << rank;
    }
}

}  // namespace

TEST(BuildQ, EnergyIdentityWithFullBasis) {
    Rng rng = make_rng(50);
    const DenseTensor t = gaussian_tensor({4, 3, 5}, rng);
    const double e = t.norm() * t.norm();
    EXPECT_NEAR(build_Q1(t, oracle::random_orthonormal(5, 5, rng)).trace(), e, 1e-10 * e);
    EXPECT_NEAR(build_Q2(t, oracle::random_orthonormal(3, 3, rng)).trace(), e, 1e-10 * e);
}

TEST(BuildQ, ZeroTensor) {
    const DenseTensor t({4, 3, 5});
    EXPECT_EQ(build_Q1(t, Matrix::Identity(5, 5)).norm(), 0.0);
    EXPECT_EQ(build_Q2(t, Matrix::Identity(3, 3)).norm(), 0.0);
}

TEST(BuildQ, MatchesLoopOracle) {
    Rng rng = make_rng(51);
    const DenseTensor t = gaussian_tensor({4, 3, 5}, rng);
    Matrix e1 = Matrix::Zero(5, 1);
    e1(0, 0) = 1.0;
    EXPECT_LE((build_Q1(t, e1) - oracle::brute_Q1(t, e1)).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix V = oracle::random_orthonormal(5, 2, rng);
    EXPECT_LE((build_Q1(t, V) - oracle::brute_Q1(t, V)).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix U = oracle::random_orthonormal(3, 2, rng);
    EXPECT_LE((build_Q2(t, U) - oracle::brute_Q2(t, U)).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix Q = build_Q1(t, V);
    EXPECT_EQ((Q - Q.transpose()).norm(), 0.0);
}

TEST(BuildQ, ShapeMismatchThrows) {
    const DenseTensor t({4, 3, 5});
    EXPECT_THROW(build_Q1(t, Matrix::Identity(4, 4)), InvalidArgument);
    EXPECT_THROW(build_Q2(t, Matrix::Identity(5, 5)), InvalidArgument);
}

TEST(MinimalRankEigvecs, ForcedArithmetic) {
    Matrix Q = Matrix::Zero(3, 3);
    Q.diagonal() << 3.0, 5.0, 2.0;
    const EigenBasis eb = minimal_rank_eigvecs(Q, 8.0);
    EXPECT_EQ(eb.rank, 2);
    EXPECT_NEAR(std::abs(eb.vectors(1, 0)), 1.0, 1e-12);
    EXPECT_NEAR(std::abs(eb.vectors(0, 1)), 1.0, 1e-12);
}

TEST(MinimalRankEigvecs, ZeroBoundGivesEmptyBasis) {
    const EigenBasis eb = minimal_rank_eigvecs(Matrix::Identity(3, 3), 0.0);
    EXPECT_EQ(eb.rank, 0);
    EXPECT_EQ(eb.vectors.cols(), 0);
}

TEST(MinimalRankEigvecs, FullTraceCountsNonzeroEigenvalues) {
    Rng rng = make_rng(52);
    const Matrix G = gaussian_matrix(6, 4, rng);
    const Matrix Q = G * G.transpose();  // rank 4
    const EigenBasis eb = minimal_rank_eigvecs(Q, Q.trace());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(Q)};
    const Eigen::VectorXd ev = es.eigenvalues().reverse();
    double partial = 0.0;
    Index expect = 0;
    while (expect < 6 && ev(expect) > 1e-10 * ev(0)) partial += ev(expect++);
    EXPECT_EQ(expect, 4);
    EXPECT_EQ(eb.rank, expect);
    EXPECT_NEAR(partial, Q.trace(), 1e-10 * Q.trace());
}

TEST(MinimalRankEigvecs, TiedClusterKeptWhole) {
    Matrix Q = Matrix::Zero(4, 4);
    Q.diagonal() << 4.0, 2.0, 2.0, 1.0;
    EXPECT_EQ(minimal_rank_eigvecs(Q, 5.0).rank, 3);
}

TEST(MinimalRankEigvecs, InfeasibleBound) {
    EXPECT_THROW(minimal_rank_eigvecs(Matrix::Identity(3, 3), 3.1), InfeasibleBound);
}

TEST(CoreClosedForm, SquareOrthonormalIsLossless) {
    Rng rng = make_rng(53);
    const DenseTensor t = gaussian_tensor({4, 3, 5}, rng);
    const Matrix U = oracle::random_orthonormal(3, 3, rng), V = oracle::random_orthonormal(5, 5, rng);
    const Tucker2Model m{core_closed_form(t, U, V), U, V};
    EXPECT_LE(distance(t, reconstruct(m)), 1e-10 * t.norm());
}

TEST(CoreClosedForm, LeadingColumnsGiveSubtensor) {
    Rng rng = make_rng(54);
    const DenseTensor t = gaussian_tensor({4, 3, 5}, rng);
    const Matrix U = Matrix::Identity(3, 2), V = Matrix::Identity(5, 3);
    const DenseTensor G = core_closed_form(t, U, V);
    ASSERT_EQ(G.shape(), (Shape{4, 2, 3}));
    for (Index d = 0; d < 4; ++d)
        for (Index a = 0; a < 2; ++a)
            for (Index b = 0; b < 3; ++b) EXPECT_EQ(G(d, a, b), t(d, a, b));
}

TEST(CoreClosedForm, PythagoreanIdentity) {
    Rng rng = make_rng(55);
    for (int trial = 0; trial < 5; ++trial) {
        const DenseTensor t = gaussian_tensor({4, 6, 7}, rng);
        const Matrix U = oracle::random_orthonormal(6, 3, rng), V = oracle::random_orthonormal(7, 2, rng);
        const DenseTensor G = core_closed_form(t, U, V);
        const double err = distance(t, reconstruct(Tucker2Model{G, U, V}));
        const double lhs = err * err, rhs = t.norm() * t.norm() - G.norm() * G.norm();
        EXPECT_NEAR(lhs, rhs, 1e-10 * t.norm() * t.norm());
    }
}

TEST(CoreClosedForm, NonOrthonormalThrows) {
    const DenseTensor t({2, 3, 3});
    Matrix U = Matrix::Identity(3, 2);
    U(0, 0) = 1.1;
    EXPECT_THROW(core_closed_form(t, U, Matrix::Identity(3, 3)), InvalidArgument);
}

TEST(Tucker2Bounded, RecoversExactMultilinearRanks) {
    Rng rng = make_rng(56);
    const auto inst = oracle::random_tucker2(9, 6, 7, 2, 3, rng);
    const Tucker2Result r = tucker2_bounded(inst.t, 0.0);
    EXPECT_EQ(r.model.U.cols(), 2);
    EXPECT_EQ(r.model.V.cols(), 3);
    EXPECT_LE(r.error, 1e-10 * inst.t.norm());
    EXPECT_LE(defect(r.model.U), 1e-10);
    EXPECT_LE(defect(r.model.V), 1e-10);
}

TEST(Tucker2Bounded, VacuousBoundGivesMinimalRanks) {
    Rng rng = make_rng(57);
    const DenseTensor t = gaussian_tensor({4, 5, 6}, rng);
    const Tucker2Result r = tucker2_bounded(t, t.norm());
    EXPECT_EQ(r.model.U.cols(), 1);
    EXPECT_EQ(r.model.V.cols(), 1);
    EXPECT_LE(r.error, t.norm() * (1.0 + 1e-12));
}

TEST(Tucker2Bounded, BoundMetAndMinimal) {
    Rng rng = make_rng(58);
    for (const double frac : {0.05, 0.1, 0.2}) {
        const DenseTensor t = gaussian_tensor({9, 8, 10}, rng);
        const double delta = frac * t.norm();
        const Tucker2Result r = tucker2_bounded(t, delta);
        EXPECT_LE(r.error, delta + 1e-8 * t.norm());
        expect_minimal(r);
        // removing the last U column by hand also breaks the bound
        if (r.model.U.cols() > 1) {
            const Matrix U = r.model.U.leftCols(r.model.U.cols() - 1);
            const double e = distance(t, reconstruct(Tucker2Model{core_closed_form(t, U, r.model.V), U, r.model.V}));
            EXPECT_GT(e, delta);
        }
        if (r.model.V.cols() > 1) {
            const Matrix V = r.model.V.leftCols(r.model.V.cols() - 1);
            const double e = distance(t, reconstruct(Tucker2Model{core_closed_form(t, r.model.U, V), r.model.U, V}));
            EXPECT_GT(e, delta);
        }
    }
}

TEST(Tucker2Bounded, TraceKeepsOrthonormalityAndCostNonIncreasing) {
    Rng rng = make_rng(59);
    const DenseTensor t = gaussian_tensor({9, 8, 10}, rng);
    const double delta = 0.3 * t.norm();
    const Tucker2Result r = tucker2_bounded(t, delta, Tucker2Options{.max_alternations = 4});
    for (std::size_t n = 0; n < r.trace.size(); ++n) {
        EXPECT_LE(r.trace[n].error, delta + 1e-8 * t.norm());
        if (n > 0) {
            EXPECT_LE(r.trace[n].cost, r.trace[n - 1].cost);
            EXPECT_LE(r.trace[n].r1, r.trace[n - 1].r1);
            EXPECT_LE(r.trace[n].r2, r.trace[n - 1].r2);
        }
    }
    EXPECT_LE(defect(r.model.U), 1e-10);
    EXPECT_LE(defect(r.model.V), 1e-10);
    EXPECT_EQ(r.trace.back().cost, tucker2_cost(9, 8, 10, r.model.U.cols(), r.model.V.cols()));
}

TEST(Tucker2Bounded, FixedRanks) {
    Rng rng = make_rng(60);
    const DenseTensor t = gaussian_tensor({4, 6, 7}, rng);
    const Tucker2Result r = tucker2_bounded(t, 0.0, Tucker2Options{.fixed_r1 = 3, .fixed_r2 = 2});
    EXPECT_EQ(r.model.U.cols(), 3);
    EXPECT_EQ(r.model.V.cols(), 2);
    EXPECT_NEAR(r.error * r.error, t.norm() * t.norm() - r.model.G.norm() * r.model.G.norm(),
                1e-10 * t.norm() * t.norm());
}

TEST(Tucker2Bounded, Errors) {
    EXPECT_THROW(tucker2_bounded(DenseTensor({2, 2, 2}), -1.0), InvalidArgument);
    EXPECT_THROW(tucker2_bounded(DenseTensor({2, 2, 2, 2}), 0.0), InvalidArgument);
    EXPECT_THROW(tucker2_bounded(DenseTensor({2, 2, 2}), 0.0, Tucker2Options{.fixed_r1 = 3}), InvalidArgument);
}

TEST(Tucker2Cost, MatchesObjective) { EXPECT_EQ(tucker2_cost(9, 64, 64, 16, 16), 16 * 64 + 16 * 64 + 16 * 16 * 9); }
