#pragma once

// The three published examples, their printed results, and solver settings
// that reproduce them.

#include "invgame/invgame.hpp"

#include <vector>

namespace fixture {

using namespace invgame;

inline Matrix mat(Index r, Index c, std::initializer_list<double> v) {
    Matrix m(r, c);
    auto it = v.begin();
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = *it++;
    return m;
}

inline Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

inline Matrix unit(Index n, Index k) {
    Matrix e = Matrix::Zero(n, 1);
    e(k) = 1.0;
    return e;
}

// ---------------------------------------------------------------------------
// Two players, two states
// ---------------------------------------------------------------------------

struct Game {
    LinearGameSystem sys;
    CostParameters R;
    FeedbackProfile K;
};

inline Game two_player() {
    Game g;
    g.sys.A = mat(2, 2, {1, 1, 0, 2});
    g.sys.players = {{unit(2, 0), unit(2, 0).transpose()}, {unit(2, 1), unit(2, 1).transpose()}};
    g.R.R = {{scalar(1), scalar(2)}, {scalar(0.5), scalar(1)}};
    g.K.K = {scalar(3), scalar(4)};
    return g;
}

inline SolverConfig two_player_config() {
    SolverConfig cfg;
    cfg.alpha = {0.45, 0.9};
    cfg.beta = {0.6};
    cfg.delta = {1e-7};
    cfg.gradient = GradientForm::Printed;
    cfg.stabilize.coupling = NewtonCoupling::OutputFeedback;
    return cfg;
}

namespace printed_two_player {
inline const double K1_initial = 2.4142, K2_initial = 4.3551;
inline const double K1 = 3.0002, K2 = 3.9999;
inline Matrix X1() { return mat(2, 2, {3.0002, 0, 0, 8.9115}); }
inline Matrix X2() { return mat(2, 2, {0.6751, 0, 0, 3.9999}); }
inline Matrix X1_initial() { return mat(2, 2, {2.4142, 0, 0, 8.3255}); }
inline Matrix X2_initial() { return mat(2, 2, {1.0303, 0, 0, 4.3551}); }
inline Matrix Q1() { return mat(2, 2, {3.0007, -3, -3, 3.6456}); }
inline Matrix Q2() { return mat(2, 2, {-1.8, -0.6751, -0.6751, -0.0005}); }
inline const int iterations = 5;
}  // namespace printed_two_player

// ---------------------------------------------------------------------------
// Two players, three states (model-free example)
// ---------------------------------------------------------------------------

inline Game three_state() {
    Game g;
    g.sys.A = Matrix::Zero(3, 3);
    g.sys.A.diagonal() << -3, 0.5, 4;
    g.sys.players = {{unit(3, 1), unit(3, 1).transpose()}, {unit(3, 2), unit(3, 2).transpose()}};
    g.R.R = {{scalar(1), scalar(0)}, {scalar(0), scalar(1)}};
    g.K.K = {scalar(4), scalar(6)};
    return g;
}

inline SolverConfig three_state_model_based_config() {
    SolverConfig cfg = two_player_config();
    cfg.delta = {1e-6};
    cfg.stabilize.seed_add_identity = true;
    return cfg;
}

inline SolverConfig three_state_model_free_config() {
    SolverConfig cfg = default_model_free_config();
    cfg.alpha = {0.45, 0.9};
    cfg.beta = {0.6};
    cfg.delta = {1e-6};
    cfg.gradient = GradientForm::Printed;
    cfg.stabilize.coupling = NewtonCoupling::OutputFeedback;
    return cfg;
}

/// Paper noise on both players; seeds 7 and 8.
inline std::vector<ExplorationNoise> three_state_noise(std::uint64_t seed = 7) {
    std::vector<ExplorationNoise> out;
    for (std::uint64_t i = 0; i < 2; ++i) {
        NoiseSpec ns;
        ns.seed = seed + i;
        out.emplace_back(ns, 1);
    }
    return out;
}

namespace printed_three_state {
inline Matrix P1() { return mat(3, 3, {1.0 / 6, 0, 0, 0, 18.0 / 7, 0, 0, 0, 0.25}); }
inline Matrix P2() { return mat(3, 3, {1.0 / 6, 0, 0, 0, 0.2414, 0, 0, 0, 9.5}); }
inline const double K1_initial = 1.618, K2_initial = 8.1231;
inline Matrix X1() { return mat(3, 3, {2.382, 0, 2.382, 0, 4, 0, 2.382, 0, 2.382}); }
inline Matrix X2() { return mat(3, 3, {-2.1231, -2.1231, 0, -2.1231, -2.1231, 0, 0, 0, 6}); }
inline Matrix Q1() {
    return mat(3, 3, {14.2949, -0.0014, 11.9104, -0.0014, 12.0006, -0.0002, 11.9104, -0.0002, 9.5279});
}
inline Matrix Q2() { return mat(3, 3, {-12.7386, -13.8002, 0, -13.8002, -14.8617, 0, 0, 0, -12}); }
}  // namespace printed_three_state

// ---------------------------------------------------------------------------
// Three agents, distributed procedure
// ---------------------------------------------------------------------------

inline Game three_agent() {
    Game g;
    g.sys.A = mat(3, 3, {1, 0, 4, 0, -3, 2, 0, 5, -2});
    g.sys.players = {{unit(3, 0), unit(3, 0).transpose()},
                     {unit(3, 1), mat(1, 3, {0, 1, 1})},
                     {unit(3, 2), mat(2, 3, {1, 0, 0, 0, 1, 0})}};
    g.R.R.assign(3, std::vector<Matrix>(3, scalar(0)));
    g.R.R[0][0] = scalar(4);
    g.R.R[1][1] = scalar(3);
    g.R.R[2][2] = scalar(2);
    g.K.K = {scalar(2), scalar(3), mat(1, 2, {4, 5})};
    return g;
}

/// Agent-private data with noise seeds 11, 12, 13.
inline PrivateStore three_agent_store(std::uint64_t seed = 11) {
    const auto g = three_agent();
    std::vector<AgentPrivate> priv;
    for (std::size_t i = 0; i < 3; ++i) {
        AgentPrivate a;
        a.C = g.sys.C(i);
        a.K_target = g.K.K[i];
        a.R = g.R.R[i][i];
        a.gamma = 1.0;
        a.noise.seed = seed + i;
        priv.push_back(a);
    }
    return PrivateStore(std::move(priv));
}

namespace printed_three_agent {
inline const double K1 = 1.9636, K2 = 2.9554;
inline Matrix K3() { return mat(1, 2, {3.9993, 4.9991}); }
inline Matrix X1() { return mat(3, 3, {7.8543, 0, 0, 0, 0, 0, 0, 0, 0}); }
inline Matrix X2() { return mat(3, 3, {0, 0, 0, 0, 8.9952, 8.7372, 0, 8.7372, 0}); }
inline Matrix X3() { return mat(3, 3, {0, 0, 7.9986, 0, 0, 9.9982, 7.9986, 9.9982, 0}); }
inline Matrix Q1() { return mat(3, 3, {-0.286, 0, -31.4174, 0, 0, 0, -31.4174, 0, 0.0001}); }
inline Matrix Q2() { return mat(3, 3, {0, 34.9487, 0, 34.9487, 80.9426, 51.893, 0, 51.893, -9.5026}); }
inline Matrix Q3() {
    return mat(3, 3, {31.988, -0.0074, 23.9957, -0.0074, -49.9999, 79.9857, 23.9957, 79.9857, -43.9921});
}
inline const int iterations = 30;
}  // namespace printed_three_agent

inline double relative(const Matrix& a, const Matrix& ref) { return (a - ref).norm() / ref.norm(); }

}  // namespace fixture
