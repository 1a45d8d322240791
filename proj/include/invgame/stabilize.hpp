#pragma once

// Initial stabilizing value tuple: asynchronous Lyapunov seeding followed by
// the asynchronous modified Newton iteration on per-player Riccati residuals.

#include "invgame/model.hpp"

#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace invgame {

/// Sign of the target-gain term in the seeding right side:
/// Plus solves F^T P + P F = -(W + F_i^T R_ii F_i), MinusPrinted uses -(W - F_i^T R_ii F_i).
enum class SeedSign { Plus, MinusPrinted };

/// How the other players enter player i's Newton plant.
///  StateFeedback:  A_i = A - sum_{j!=i} B_j R_jj^{-1} B_j^T X_j, weight C_i^T C_i.
///  OutputFeedback: the other players act through their realizable output gains
///                  K_j C_j = R_jj^{-1} B_j^T X_j C_j^+ C_j, and their cross weights
///                  (K_j C_j)^T R_ij (K_j C_j) are added to player i's weight.
enum class NewtonCoupling { StateFeedback, OutputFeedback };

struct StabilizeConfig {
    SeedSign seed_sign = SeedSign::Plus;
    bool seed_add_identity = false;  ///< W_i = C_i^T C_i + I in seeding
    NewtonCoupling coupling = NewtonCoupling::StateFeedback;
    double eps = 1e-10;
    int max_outer = 100;
    int max_halvings = 30;
    double hurwitz_margin = kDefaultHurwitzMargin;
};

struct NewtonTraceEntry {
    int k = 0;
    std::size_t player = 0;
    double residual_trace = 0.0;
    double spectral_abscissa = 0.0;  ///< aggregate A - sum B_j R_jj^{-1} B_j^T X_j after the step
    double step_scale = 1.0;
};

using NewtonTrace = std::vector<NewtonTraceEntry>;

class StabilizationError : public NumericalError {
public:
    StabilizationError(const std::string& what, NewtonTrace trace)
        : NumericalError("stabilize", what), trace_(std::move(trace)) {}

    [[nodiscard]] const NewtonTrace& trace() const noexcept { return trace_; }

private:
    NewtonTrace trace_;
};

struct StabilizationResult {
    ValueProfile seeds;
    ValueProfile values;
    FeedbackProfile feedback;
    NewtonTrace trace;
    int iterations = 0;
};

[[nodiscard]] inline Matrix seed_weight(const Matrix& C, bool add_identity) {
    Matrix w = C.transpose() * C;
    if (add_identity) w += Matrix::Identity(C.cols(), C.cols());
    return w;
}

[[nodiscard]] inline Matrix aggregate_state_loop(const LinearGameSystem& sys, const CostParameters& costs,
                                                 const ValueProfile& v) {
    Matrix f = sys.A;
    for (std::size_t j = 0; j < sys.num_players(); ++j)
        f -= sys.B(j) * state_gain(sys.B(j), costs.Rij(j, j), v.X[j]);
    return f;
}

/// Asynchronous seeding. For i = 1..N in order, solves
/// (A - sum_{j>=i} B_j F_j - sum_{j<i} B_j R_jj^{-1} B_j^T P_j)^T P + P (.) = -(W_i +- F_i^T R_ii F_i).
[[nodiscard]] inline ValueProfile seed_values(const LinearGameSystem& sys, const CostParameters& costs,
                                              const std::vector<Matrix>& F, const StabilizeConfig& cfg = {}) {
    const std::size_t N = sys.num_players();
    require_dims(F.size() == N, "seed_values: one F_j per player required");
    Matrix target_loop = sys.A;
    for (std::size_t j = 0; j < N; ++j) {
        require_dims(F[j].rows() == sys.m(j) && F[j].cols() == sys.n(), "seed_values: F_j must be m_j x n");
        target_loop -= sys.B(j) * F[j];
    }
    const auto rep = stability_report(target_loop, cfg.hurwitz_margin);
    if (!rep.is_hurwitz) {
        std::ostringstream os;
        os << "target profile A - sum B_j F_j is not Hurwitz (abscissa " << rep.spectral_abscissa << ")";
        throw StabilizationError(os.str(), {});
    }

    ValueProfile P;
    for (std::size_t i = 0; i < N; ++i) {
        Matrix plant = sys.A;
        for (std::size_t j = i; j < N; ++j) plant -= sys.B(j) * F[j];
        for (std::size_t j = 0; j < i; ++j) plant -= sys.B(j) * state_gain(sys.B(j), costs.Rij(j, j), P.X[j]);
        const Matrix gain_term = F[i].transpose() * costs.Rij(i, i) * F[i];
        const Matrix w = seed_weight(sys.C(i), cfg.seed_add_identity);
        const Matrix rhs = cfg.seed_sign == SeedSign::Plus ? Matrix(w + gain_term) : Matrix(w - gain_term);
        P.X.push_back(solve_lyapunov(plant, rhs));
    }
    const auto agg = stability_report(aggregate_state_loop(sys, costs, P), cfg.hurwitz_margin);
    if (!agg.is_hurwitz) {
        std::ostringstream os;
        os << "seed tuple is not stabilizing (abscissa " << agg.spectral_abscissa << ")";
        throw StabilizationError(os.str(), {});
    }
    return P;
}

/// Gain with which player j acts on the state inside another player's Newton plant.
[[nodiscard]] inline Matrix coupling_gain(const Matrix& B, const Matrix& C, const Matrix& Rjj, const Matrix& X,
                                          NewtonCoupling coupling) {
    const Matrix s = state_gain(B, Rjj, X);
    if (coupling == NewtonCoupling::StateFeedback) return s;
    return s * right_pinv(C) * C;
}

/// Player i's drifting plant. Players j < i are read from `x_next` (already
/// updated in this sweep), players j > i from `x_prev`.
[[nodiscard]] inline Matrix newton_plant(const LinearGameSystem& sys, const CostParameters& costs,
                                         const ValueProfile& x_prev, const ValueProfile& x_next, std::size_t i,
                                         NewtonCoupling coupling = NewtonCoupling::StateFeedback) {
    Matrix Ai = sys.A;
    for (std::size_t j = 0; j < sys.num_players(); ++j) {
        if (j == i) continue;
        const Matrix& Xj = j < i ? x_next.X.at(j) : x_prev.X.at(j);
        Ai -= sys.B(j) * coupling_gain(sys.B(j), sys.C(j), costs.Rij(j, j), Xj, coupling);
    }
    return Ai;
}

/// State weight of player i's Newton residual.
[[nodiscard]] inline Matrix newton_weight(const LinearGameSystem& sys, const CostParameters& costs,
                                          const ValueProfile& x_prev, const ValueProfile& x_next, std::size_t i,
                                          NewtonCoupling coupling = NewtonCoupling::StateFeedback) {
    Matrix w = sys.C(i).transpose() * sys.C(i);
    if (coupling == NewtonCoupling::StateFeedback) return w;
    for (std::size_t j = 0; j < sys.num_players(); ++j) {
        if (j == i) continue;
        const Matrix& Xj = j < i ? x_next.X.at(j) : x_prev.X.at(j);
        const Matrix L = coupling_gain(sys.B(j), sys.C(j), costs.Rij(j, j), Xj, coupling);
        w += L.transpose() * costs.Rij(i, j) * L;
    }
    return w;
}

struct NewtonResidual {
    Matrix G;     ///< R_ii^{-1} B_i^T X_i (C_i^+ C_i - I)
    Matrix Rmat;  ///< W + G^T R_ii G + A_i^T X_i + X_i A_i - X_i B_i R_ii^{-1} B_i^T X_i
};

[[nodiscard]] inline NewtonResidual newton_residual(const Matrix& B, const Matrix& C, const Matrix& Rii,
                                                    const Matrix& W, const Matrix& X, const Matrix& Ai) {
    const Index n = X.rows();
    const Matrix S = state_gain(B, Rii, X);
    NewtonResidual r;
    r.G = S * (right_pinv(C) * C - Matrix::Identity(n, n));
    r.Rmat = symmetrize(W + r.G.transpose() * Rii * r.G + Ai.transpose() * X + X * Ai - X * B * S);
    return r;
}

[[nodiscard]] inline NewtonResidual newton_residual(const LinearGameSystem& sys, const CostParameters& costs,
                                                    const Matrix& X, const Matrix& Ai, std::size_t i) {
    return newton_residual(sys.B(i), sys.C(i), costs.Rij(i, i), sys.C(i).transpose() * sys.C(i), X, Ai);
}

struct NewtonStep {
    Matrix X;
    double step_scale = 1.0;
};

/// Solves (A_i - B R^{-1} B^T X)^T P + P (.) = -Rmat and returns X + lambda P with
/// lambda halved until A_i - B R^{-1} B^T (X + lambda P) stays Hurwitz.
[[nodiscard]] inline NewtonStep newton_step(const Matrix& B, const Matrix& Rii, const Matrix& X, const Matrix& Ai,
                                            const Matrix& Rmat, int max_halvings = 30,
                                            double margin = kDefaultHurwitzMargin) {
    const Matrix loop = Ai - B * state_gain(B, Rii, X);
    const auto before = stability_report(loop, margin);
    if (!before.is_hurwitz) {
        std::ostringstream os;
        os << "Newton plant A_i - B_i R_ii^-1 B_i^T X_i is not Hurwitz (abscissa " << before.spectral_abscissa
           << ")";
        throw NumericalError("newton_step", os.str());
    }
    const Matrix P = solve_lyapunov(loop, Rmat);
    double lambda = 1.0;
    for (int h = 0; h <= max_halvings; ++h, lambda *= 0.5) {
        const Matrix Xn = symmetrize(X + lambda * P);
        if (stability_report(Ai - B * state_gain(B, Rii, Xn), margin).is_hurwitz) return {Xn, lambda};
    }
    throw NumericalError("newton_step", "no damped step keeps the per-player closed loop Hurwitz");
}

/// Seeding plus modified Newton sweeps until trace(R^T R) < eps for every player.
[[nodiscard]] inline StabilizationResult run_stabilization(const LinearGameSystem& sys, const CostParameters& costs,
                                                           const std::vector<Matrix>& F,
                                                           const StabilizeConfig& cfg = {}) {
    StabilizationResult out;
    out.seeds = seed_values(sys, costs, F, cfg);
    ValueProfile X = out.seeds;
    const std::size_t N = sys.num_players();

    bool converged = false;
    for (int k = 0; k < cfg.max_outer && !converged; ++k) {
        ValueProfile Xn = X;
        double worst = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            const Matrix Ai = newton_plant(sys, costs, X, Xn, i, cfg.coupling);
            const Matrix W = newton_weight(sys, costs, X, Xn, i, cfg.coupling);
            const auto res = newton_residual(sys.B(i), sys.C(i), costs.Rij(i, i), W, X.X[i], Ai);
            const double tr = (res.Rmat.transpose() * res.Rmat).trace();
            worst = std::max(worst, tr);
            NewtonStep step;
            try {
                step = newton_step(sys.B(i), costs.Rij(i, i), X.X[i], Ai, res.Rmat, cfg.max_halvings,
                                   cfg.hurwitz_margin);
            } catch (const NumericalError& e) {
                std::ostringstream os;
                os << "Newton iterate k=" << k << ", player " << i + 1 << ": " << e.what();
                throw StabilizationError(os.str(), out.trace);
            }
            Xn.X[i] = step.X;
            NewtonTraceEntry entry;
            entry.k = k;
            entry.player = i;
            entry.residual_trace = tr;
            entry.step_scale = step.step_scale;
            entry.spectral_abscissa = spectral_abscissa(aggregate_state_loop(sys, costs, Xn));
            out.trace.push_back(entry);
        }
        X = std::move(Xn);
        out.iterations = k + 1;
        converged = worst < cfg.eps;
    }
    if (!converged) {
        std::ostringstream os;
        os << "modified Newton did not reach trace(R^T R) < " << cfg.eps << " in " << cfg.max_outer
           << " sweeps";
        throw StabilizationError(os.str(), out.trace);
    }

    out.values = X;
    out.feedback = output_gains(sys, costs, X);
    const auto agg = stability_report(aggregate_state_loop(sys, costs, X), cfg.hurwitz_margin);
    if (!agg.is_hurwitz) {
        std::ostringstream os;
        os << "Newton tuple is not stabilizing (abscissa " << agg.spectral_abscissa << ")";
        throw StabilizationError(os.str(), out.trace);
    }
    const auto rep = stability_report(closed_loop(sys, out.feedback), cfg.hurwitz_margin);
    if (!rep.is_hurwitz) {
        std::ostringstream os;
        os << "output-feedback profile from Newton is not stabilizing (abscissa " << rep.spectral_abscissa << ")";
        throw StabilizationError(os.str(), out.trace);
    }
    return out;
}

}  // namespace invgame
