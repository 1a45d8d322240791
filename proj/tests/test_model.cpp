#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace invgame;

namespace {

bool any_contains(const std::vector<std::string>& v, const std::string& s) {
    for (const auto& x : v)
        if (x.find(s) != std::string::npos) return true;
    return false;
}

/// Symmetric X with b^T X = t, plus a random part invisible to b.
Matrix value_with_gain(const Matrix& b, const Matrix& t, const Matrix& S) {
    const double bb = b.squaredNorm();
    const Index n = b.rows();
    Matrix X = (b * t + t.transpose() * b.transpose()) / bb - (t * b)(0, 0) * b * b.transpose() / (bb * bb);
    const Matrix Pp = Matrix::Identity(n, n) - b * b.transpose() / bb;
    return X + Pp * S * Pp;
}

/// A game with a known equilibrium: pick stabilizing output gains, build X_i
/// consistent with them, and define Q_i from the closed-loop Lyapunov form.
struct Known {
    LinearGameSystem sys;
    CostParameters costs;
    ValueProfile X;
    FeedbackProfile K;
};

std::optional<Known> known_game(oracle::Gen& gen) {
    Known g;
    const Index n = gen.integer(2, 4);
    const int N = gen.integer(1, 3);
    g.sys.A = gen.matrix(n, n);
    for (int i = 0; i < N; ++i) {
        // C_i has B_i^T in its row space, so the implied state gain is an output gain
        const Matrix b = gen.matrix(n, 1);
        const Index p = gen.integer(1, static_cast<int>(n));
        Matrix C = gen.matrix(p, n);
        C.row(0) = b.transpose();
        if (!full_row_rank(C)) return std::nullopt;
        g.sys.players.push_back({b, C});
        g.K.K.push_back(gen.matrix(1, p, -1.5, 1.5));
    }
    if (spectral_abscissa(closed_loop(g.sys, g.K)) > -0.1) return std::nullopt;
    g.costs.R.assign(N, {});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) g.costs.R[i].push_back(i == j ? gen.spd(1) : Matrix(gen.symmetric(1, 0.5)));
    for (int i = 0; i < N; ++i) {
        const Matrix t = g.costs.R[i][i] * g.K.K[i] * g.sys.C(i);
        g.X.X.push_back(value_with_gain(g.sys.B(i), t, gen.symmetric(n)));
    }
    const Matrix acl = closed_loop(g.sys, g.K);
    for (int i = 0; i < N; ++i) {
        Matrix q = -(acl.transpose() * g.X.X[i] + g.X.X[i] * acl);
        for (int j = 0; j < N; ++j) {
            const Matrix F = g.K.K[j] * g.sys.C(j);
            q -= F.transpose() * g.costs.R[i][j] * F;
        }
        g.costs.Q.push_back(symmetrize(q));
    }
    return g;
}

std::vector<Known> known_games(int count, std::uint64_t seed) {
    oracle::Gen gen(seed);
    std::vector<Known> out;
    while (static_cast<int>(out.size()) < count)
        if (auto g = known_game(gen)) out.push_back(*g);
    return out;
}

}  // namespace

TEST(Validation, AcceptsPublishedExamples) {
    for (const auto& g : {fixture::two_player(), fixture::three_state()})
        EXPECT_TRUE(validate_game(g.sys, g.R).empty());
}

TEST(Validation, ReportsShapeRankAndCouplingProblems) {
    auto g = fixture::two_player();
    g.sys.players[0].C = Matrix::Zero(1, 2);
    auto v = validate_system(g.sys);
    EXPECT_TRUE(any_contains(v, "C_1 not full row rank"));

    g = fixture::two_player();
    g.sys.players[1].C = fixture::mat(1, 2, {1, 0});  // C_2 B_2 = 0
    v = validate_system(g.sys);
    EXPECT_TRUE(any_contains(v, "C_2 B_2 is zero"));
    ValidationOptions loose;
    loose.require_output_coupling = false;
    EXPECT_TRUE(validate_system(g.sys, loose).empty());

    g = fixture::two_player();
    g.sys.players[0].B = Matrix::Ones(3, 1);
    EXPECT_TRUE(any_contains(validate_system(g.sys), "B_1 must be n x m"));

    g = fixture::two_player();
    g.sys.A = Matrix::Ones(2, 3);
    EXPECT_TRUE(any_contains(validate_system(g.sys), "A must be square"));
}

TEST(Validation, ReportsCostProblems) {
    auto g = fixture::two_player();
    g.R.R[0][0] = fixture::scalar(-1);
    EXPECT_TRUE(any_contains(validate_costs(g.sys, g.R), "R_11 not positive definite"));
    g = fixture::two_player();
    g.R.R[1][0] = Matrix::Ones(2, 2);
    EXPECT_TRUE(any_contains(validate_costs(g.sys, g.R), "R_21 must be 1x1"));
    g = fixture::two_player();
    g.R.Q = {fixture::mat(2, 2, {1, 2, 0, 1}), Matrix::Zero(2, 2)};
    EXPECT_TRUE(any_contains(validate_costs(g.sys, g.R), "Q_1 not symmetric"));
}

TEST(Gains, OutputGainInvertsTheConstruction) {
    oracle::Gen gen(11);
    for (int k = 0; k < 30; ++k) {
        const Index n = gen.integer(2, 4);
        const Matrix b = gen.matrix(n, 1);
        Matrix C = gen.matrix(gen.integer(1, static_cast<int>(n)), n);
        C.row(0) = b.transpose();
        if (!full_row_rank(C)) continue;
        const Matrix R = gen.spd(1), K = gen.matrix(1, C.rows());
        const Matrix X = value_with_gain(b, R * K * C, gen.symmetric(n));
        EXPECT_LT((output_gain(b, C, R, X) - K).norm(), 1e-9);
        EXPECT_LT(existence_defect(b, C, X), 1e-9);
    }
}

TEST(AreResidual, VanishesOnConstructedEquilibria) {
    for (const auto& g : known_games(40, 12))
        for (std::size_t i = 0; i < g.sys.num_players(); ++i)
            EXPECT_LT(are_residual(g.sys, g.costs, g.X, i).norm(), 1e-9 * (1 + g.costs.Q[i].norm()));
}

TEST(VerifyNash, CertifiesConstructedEquilibria) {
    for (const auto& g : known_games(40, 13)) {
        const auto c = verify_nash(g.sys, g.costs, g.X, g.K);
        EXPECT_TRUE(c.passed) << (c.failures.empty() ? "" : c.failures.front());
        EXPECT_LT(c.spectral_abscissa, 0.0);
        EXPECT_EQ(c.residual_norms.size(), g.sys.num_players());
    }
}

TEST(VerifyNash, NamesEachKindOfFailure) {
    const auto g = known_games(1, 14).front();
    auto costs = g.costs;
    costs.Q[0] += 1e-3 * Matrix::Identity(g.sys.n(), g.sys.n());
    auto c = verify_nash(g.sys, costs, g.X, g.K);
    EXPECT_FALSE(c.passed);
    EXPECT_TRUE(any_contains(c.failures, "ARE residual of player 1"));

    auto X = g.X;
    X.X[0](0, 1) += 1e-3;
    c = verify_nash(g.sys, g.costs, X, g.K);
    EXPECT_TRUE(any_contains(c.failures, "X_1 not symmetric"));

    auto K = g.K;
    K.K[0](0, 0) += 1e-3;
    c = verify_nash(g.sys, g.costs, g.X, K);
    EXPECT_TRUE(any_contains(c.failures, "gain mismatch"));

    auto sys = g.sys;
    sys.A += 100.0 * Matrix::Identity(sys.n(), sys.n());
    c = verify_nash(sys, g.costs, g.X, g.K);
    EXPECT_TRUE(any_contains(c.failures, "not Hurwitz"));
}

TEST(VerifyNash, ExistenceDefectIsDetected) {
    // C_1 sees only x_1 while B_1^T X_1 also weights x_2
    auto g = fixture::two_player();
    const ValueProfile X{{fixture::mat(2, 2, {3, 1, 1, 9}), fixture::mat(2, 2, {1, 0, 0, 4})}};
    const auto c = verify_nash(g.sys, CostParameters{{Matrix::Zero(2, 2), Matrix::Zero(2, 2)}, g.R.R}, X, g.K);
    EXPECT_NEAR(c.existence_defects[0], 1.0, 1e-12);
    EXPECT_TRUE(any_contains(c.failures, "existence defect of player 1"));
}

TEST(EquivalentCosts, RandomTradesKeepTheCertificate) {
    oracle::Gen gen(15);
    for (const auto& g : known_games(20, 16)) {
        const std::size_t N = g.sys.num_players();
        std::vector<std::vector<Matrix>> dR(N);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j)
                dR[i].push_back(i == j ? Matrix::Zero(1, 1) : Matrix(gen.symmetric(1, 3.0)));
        const auto costs = generate_equivalent_costs(g.sys, g.costs, g.K, dR);
        const auto c = verify_nash(g.sys, costs, g.X, g.K);
        EXPECT_TRUE(c.passed) << (c.failures.empty() ? "" : c.failures.front());
        for (std::size_t i = 0; i < N; ++i) EXPECT_EQ(costs.R[i][i], g.costs.R[i][i]);
    }
}

TEST(EquivalentCosts, ZeroTradeIsIdentity) {
    const auto g = known_games(1, 17).front();
    const std::size_t N = g.sys.num_players();
    const std::vector<std::vector<Matrix>> zero(N, std::vector<Matrix>(N, Matrix::Zero(1, 1)));
    const auto costs = generate_equivalent_costs(g.sys, g.costs, g.K, zero);
    for (std::size_t i = 0; i < N; ++i) {
        EXPECT_EQ(costs.Q[i], g.costs.Q[i]);
        for (std::size_t j = 0; j < N; ++j) EXPECT_EQ(costs.R[i][j], g.costs.R[i][j]);
    }
}

TEST(EquivalentCosts, OwnWeightTradeIsRejected) {
    const auto g = fixture::two_player();
    CostParameters costs{{Matrix::Zero(2, 2), Matrix::Zero(2, 2)}, g.R.R};
    std::vector<std::vector<Matrix>> dR(2, std::vector<Matrix>(2, Matrix::Zero(1, 1)));
    dR[1][1](0, 0) = 0.1;
    try {
        (void)generate_equivalent_costs(g.sys, costs, g.K, dR);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("deltaR_22 must be zero"), std::string::npos);
    }
}
