#pragma once

// Model-free pipeline. Every model equation is replaced by its integral form
// along one noisy trajectory: for any symmetric M and gains L_j,
//
//   int x^T (A_L^T M + M A_L) x = x^T M x |_{t_{l-1}}^{t_l}
//                                 - 2 sum_j int (u_j + L_j x)^T B_j^T M x,
//   A_L = A - sum_j B_j L_j,
//
// and the row of int (u_j + L_j x)^T N x, N = B_j^T M, is
// (I_xu_j + I_xx (I kron L_j^T)) vec(N).

#include "invgame/inverse_mb.hpp"
#include "invgame/trajectory.hpp"

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace invgame {

struct MfEstimate {
    Matrix P;
    std::vector<Matrix> BtP;  ///< B_j^T P, in data player order
    double residual_norm = 0.0;
    double rhs_norm = 0.0;
    double condition = 0.0;
    double min_singular_value = 0.0;
};

/// I_xu_j + I_xx (I kron L^T) for the data block k.
[[nodiscard]] inline Matrix input_block(const DataMatrices& d, std::size_t k, const Matrix& L) {
    const Index n = d.n;
    require_dims(L.cols() == n && d.I_xu.at(k).cols() == n * L.rows(), "input_block: gain has wrong shape");
    return d.I_xu[k] + d.I_xx * kron(Matrix::Identity(n, n), L.transpose());
}

/// Solves [delta_xx, -2 block_1, ..., -2 block_N] [hat P; vec(B_1^T P); ...] = rhs.
[[nodiscard]] inline MfEstimate solve_joint(const DataMatrices& d, const std::vector<Matrix>& L, const Vector& rhs,
                                            const std::string& stage) {
    require_dims(L.size() == d.I_xu.size(), stage + ": one gain per recorded player");
    const Index n = d.n;
    const Index h = hat_size(n);
    Index cols = h;
    for (const auto& m : d.I_xu) cols += m.cols();
    Matrix theta(d.rows(), cols);
    theta.leftCols(h) = d.delta_xx;
    Index c = h;
    for (std::size_t k = 0; k < L.size(); ++k) {
        const Index w = d.I_xu[k].cols();
        theta.middleCols(c, w) = -2.0 * input_block(d, k, L[k]);
        c += w;
    }
    const auto ls = lstsq(theta, rhs, stage);
    MfEstimate est;
    est.P = unhat(Vector(ls.solution.col(0).head(h)), n);
    c = h;
    for (std::size_t k = 0; k < L.size(); ++k) {
        const Index m = d.I_xu[k].cols() / n;
        est.BtP.push_back(unvec(ls.solution.col(0).segment(c, n * m), m, n));
        c += n * m;
    }
    est.residual_norm = ls.residual_norm;
    est.rhs_norm = ls.rhs_norm;
    est.condition = ls.condition;
    est.min_singular_value = ls.singular_values.empty() ? 0.0 : ls.singular_values.back();
    return est;
}

/// Seeding equation for one player from data. `L[k]` is the gain acting for
/// data player k (the target F_j for j >= i, the estimated R_jj^{-1} B_j^T P_j
/// for j < i); `weight` is W_i + F_i^T R_ii F_i.
[[nodiscard]] inline MfEstimate mf_seed_solve(const DataMatrices& d, const std::vector<Matrix>& L,
                                              const Matrix& weight) {
    return solve_joint(d, L, -d.I_xx * vec(weight), "mf_seed_solve");
}

/// B_j = ((B_j^T P) P^{-1})^T for every block of the estimate.
[[nodiscard]] inline std::vector<Matrix> estimate_B(const MfEstimate& est) {
    const Eigen::JacobiSVD<Matrix> svd(est.P);
    const auto& sv = svd.singularValues();
    if (!(sv(sv.size() - 1) > 0.0) || sv(0) / sv(sv.size() - 1) > 1e10)
        throw NumericalError("estimate_B", "estimated P is singular or ill-conditioned");
    const auto lu = est.P.partialPivLu();
    std::vector<Matrix> out;
    for (const auto& btp : est.BtP) out.push_back(lu.solve(btp.transpose()));  // P^{-1} P B = B (P symmetric)
    return out;
}

/// Integral of x^T R(X_i) x per interval, with R the Newton residual of player i.
/// `weight` = W + F^T R_ii F with F = K_i C_i; `Lp[k]` the gain of data player k
/// (F for player i itself); `B` the estimated input matrices.
[[nodiscard]] inline Vector mf_newton_residual(const DataMatrices& d, const Matrix& weight, const Matrix& X,
                                               const std::vector<Matrix>& Lp, const std::vector<Matrix>& B) {
    require_dims(Lp.size() == d.I_xu.size() && B.size() == d.I_xu.size(),
                 "mf_newton_residual: one gain and B per recorded player");
    Vector rx = d.I_xx * vec(weight) + d.delta_xx * hat(X).entries;
    for (std::size_t k = 0; k < Lp.size(); ++k)
        rx -= 2.0 * input_block(d, k, Lp[k]) * vec(B[k].transpose() * X);
    return rx;
}

/// Newton update from data: Theta [hat P; vec(B_j^T P) ...] = -RX, where the
/// gains `L` describe the plant A_i - B_i R_ii^{-1} B_i^T X_i.
[[nodiscard]] inline MfEstimate mf_newton_step(const DataMatrices& d, const Vector& rx, const std::vector<Matrix>& L) {
    return solve_joint(d, L, -rx, "mf_newton_step");
}

/// Source of the products B_j^T X_i entering the cost-update right side.
///  Joint:       estimated from the same data together with Q_i; the noise terms are
///               then fitted by the data rather than cancelled through B-hat.
///  SubstituteB: formed as B-hat_j^T X_i; sensitive to errors in B-hat because the
///               exploration noise enters multiplied by (B_j - B-hat_j).
enum class QEstimation { Joint, SubstituteB };

/// hat(Q_i) = argmin ||I_qx hat(Q) - Omega_i||, with
/// Omega_i = -I_xx vec(sum_j F_j^T R_ij F_j) - delta_xx hat(X_i)
///           + 2 sum_j (I_xu_j + I_xx (I kron F_j^T)) vec(B_j^T X_i).
[[nodiscard]] inline Matrix mf_update_cost_Q(const DataMatrices& d, const Matrix& X, const std::vector<Matrix>& F,
                                             const std::vector<Matrix>& R_row, const std::vector<Matrix>& B,
                                             QEstimation mode = QEstimation::Joint) {
    require_dims(F.size() == d.I_xu.size() && R_row.size() == F.size(),
                 "mf_update_cost_Q: one gain and weight per recorded player");
    const Index n = d.n;
    Matrix cross = Matrix::Zero(n, n);
    for (std::size_t k = 0; k < F.size(); ++k) cross += F[k].transpose() * R_row[k] * F[k];
    const Vector base = -d.I_xx * vec(cross) - d.delta_xx * hat(X).entries;

    std::vector<Matrix> BtX(F.size());
    if (mode == QEstimation::SubstituteB) {
        require_dims(B.size() == F.size(), "mf_update_cost_Q: one B per recorded player");
        for (std::size_t k = 0; k < F.size(); ++k) BtX[k] = B[k].transpose() * X;
    } else {
        const Index h = hat_size(n);
        Index cols = h;
        for (const auto& m : d.I_xu) cols += m.cols();
        Matrix H(d.rows(), cols);
        H.leftCols(h) = d.I_qx;
        Index c = h;
        for (std::size_t k = 0; k < F.size(); ++k) {
            H.middleCols(c, d.I_xu[k].cols()) = -2.0 * input_block(d, k, F[k]);
            c += d.I_xu[k].cols();
        }
        const auto joint = lstsq(H, base, "mf_update_cost_Q");
        c = h;
        for (std::size_t k = 0; k < F.size(); ++k) {
            const Index m = d.I_xu[k].cols() / n;
            BtX[k] = unvec(joint.solution.col(0).segment(c, n * m), m, n);
            c += n * m;
        }
    }
    Vector omega = base;
    for (std::size_t k = 0; k < F.size(); ++k) omega += 2.0 * input_block(d, k, F[k]) * vec(BtX[k]);
    const auto ls = lstsq(d.I_qx, omega, "mf_update_cost_Q");
    return unhat(Vector(ls.solution.col(0)), n);
}

/// Least-squares estimate of hat(R) from RX: the quantity driven below eps.
[[nodiscard]] inline Matrix mf_residual_estimate(const DataMatrices& d, const Vector& rx) {
    return unhat(Vector(lstsq(d.I_qx, rx, "mf_residual_estimate").solution.col(0)), d.n);
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

[[nodiscard]] inline SolverConfig default_model_free_config() {
    SolverConfig cfg;
    cfg.stabilize.seed_add_identity = true;
    cfg.stabilize.eps = 1e-6;
    cfg.q_each_iteration = false;
    cfg.certify_each_iteration = false;
    return cfg;
}

struct MfResult {
    CostParameters costs;
    ValueProfile values;
    FeedbackProfile feedback;
    std::vector<Matrix> B_est;
    std::vector<MfEstimate> seeds;
    ValueProfile newton_values;
    FeedbackProfile newton_feedback;
    ValueProfile corrected_initial;
    NewtonTrace newton_trace;
    int newton_iterations = 0;
    InverseTrace trace;
    int outer_iterations = 0;
    std::optional<NashCertificate> certificate;  ///< against the true system when supplied
};

/// Runs seeding, model-free Newton, correction, gradient loop and the data-based
/// Q evaluation. The data must record all N players in index order. `truth` is
/// used only for diagnostics (closed-loop abscissa and final certificate).
[[nodiscard]] inline MfResult solve_inverse_model_free(const DataMatrices& d, const std::vector<Matrix>& C,
                                                       const FeedbackProfile& K_target, const CostParameters& R_init,
                                                       const SolverConfig& cfg,
                                                       const LinearGameSystem* truth = nullptr,
                                                       QEstimation q_mode = QEstimation::Joint) {
    const std::size_t N = C.size();
    require_dims(K_target.K.size() == N && R_init.R.size() == N, "model-free: inconsistent player counts");
    require_dims(d.player_ids.size() == N, "model-free: data must record every player");
    for (std::size_t j = 0; j < N; ++j)
        require_dims(d.player_ids[j] == j, "model-free: data players must be in index order");
    const auto& scfg = cfg.stabilize;
    const auto& R = R_init.R;
    auto Rjj = [&](std::size_t j) -> const Matrix& { return R[j][j]; };

    MfResult out;
    out.costs.R = R;
    const auto F_target = target_state_gains(C, K_target.K);

    // Seeding
    ValueProfile P;
    std::vector<Matrix> B(N);
    for (std::size_t i = 0; i < N; ++i) {
        std::vector<Matrix> L(N);
        for (std::size_t j = 0; j < N; ++j)
            L[j] = j < i ? Matrix(Rjj(j).ldlt().solve(out.seeds[j].BtP[j])) : F_target[j];
        const Matrix gain_term = F_target[i].transpose() * Rjj(i) * F_target[i];
        const Matrix w = seed_weight(C[i], scfg.seed_add_identity);
        const Matrix weight = scfg.seed_sign == SeedSign::Plus ? Matrix(w + gain_term) : Matrix(w - gain_term);
        out.seeds.push_back(mf_seed_solve(d, L, weight));
        P.X.push_back(out.seeds.back().P);
        B[i] = estimate_B(out.seeds.back())[i];
    }
    out.B_est = B;

    auto abscissa = [&](const FeedbackProfile& fb) {
        if (!truth) return std::nan("");
        return spectral_abscissa(closed_loop(*truth, fb));
    };
    auto coupling = [&](std::size_t j, const Matrix& Xj) {
        return coupling_gain(B[j], C[j], Rjj(j), Xj, scfg.coupling);
    };

    // Newton
    ValueProfile X = P;
    bool converged = false;
    for (int k = 0; k < scfg.max_outer && !converged; ++k) {
        ValueProfile Xn = X;
        converged = true;
        for (std::size_t i = 0; i < N; ++i) {
            const Matrix& Xi = X.X[i];
            std::vector<Matrix> Lp(N);
            Matrix W = C[i].transpose() * C[i];
            for (std::size_t j = 0; j < N; ++j) {
                if (j == i) continue;
                Lp[j] = coupling(j, j < i ? Xn.X[j] : X.X[j]);
                if (scfg.coupling == NewtonCoupling::OutputFeedback) W += Lp[j].transpose() * R[i][j] * Lp[j];
            }
            const Matrix S = Rjj(i).ldlt().solve(B[i].transpose() * Xi);
            const Matrix Fi = S * right_pinv(C[i]) * C[i];
            Lp[i] = Fi;
            const Vector rx = mf_newton_residual(d, W + Fi.transpose() * Rjj(i) * Fi, Xi, Lp, B);
            const Matrix res_est = mf_residual_estimate(d, rx);

            std::vector<Matrix> L = Lp;
            L[i] = S;
            const auto step = mf_newton_step(d, rx, L);
            Xn.X[i] = symmetrize(Xi + step.P);

            NewtonTraceEntry entry;
            entry.k = k;
            entry.player = i;
            entry.residual_trace = (res_est.transpose() * res_est).trace();
            entry.spectral_abscissa = std::nan("");
            out.newton_trace.push_back(entry);
            if (!(res_est.norm() < scfg.eps || step.P.norm() < scfg.eps)) converged = false;
        }
        X = std::move(Xn);
        out.newton_iterations = k + 1;
    }
    if (!converged) {
        std::ostringstream os;
        os << "model-free Newton did not converge to eps=" << scfg.eps << " in " << scfg.max_outer << " sweeps";
        throw NumericalError("mf_newton", os.str());
    }
    out.newton_values = X;
    for (std::size_t i = 0; i < N; ++i) out.newton_feedback.K.push_back(output_gain(B[i], C[i], Rjj(i), X.X[i]));

    // Correction
    ValueProfile X0;
    for (std::size_t i = 0; i < N; ++i) {
        const auto corr = correct_value_matrix(B[i], C[i], Rjj(i), X.X[i], out.newton_feedback.K[i],
                                               per_player(cfg.alpha, i, "alpha"), cfg.correction_tol, cfg.max_inner);
        X0.X.push_back(symmetrize(corr.X));
    }
    out.corrected_initial = X0;

    GradientLoopHooks hooks;
    hooks.update_Q = [&](const ValueProfile& v, const FeedbackProfile& fb) {
        std::vector<Matrix> F(N);
        for (std::size_t j = 0; j < N; ++j) F[j] = fb.K[j] * C[j];
        std::vector<Matrix> Q;
        for (std::size_t i = 0; i < N; ++i) Q.push_back(mf_update_cost_Q(d, v.X[i], F, R[i], B, q_mode));
        return Q;
    };
    if (truth) {
        hooks.abscissa = abscissa;
        hooks.abort_on_instability = false;
        hooks.certify = [&](const std::vector<Matrix>& Q, const ValueProfile& v, const FeedbackProfile& fb) {
            return verify_nash(*truth, CostParameters{Q, R}, v, fb, cfg.tolerances);
        };
    }
    auto loop = run_gradient_loop(B, C, out.costs, K_target.K, X0, cfg, hooks);
    out.values = std::move(loop.values);
    out.feedback = std::move(loop.feedback);
    out.costs.Q = std::move(loop.Q);
    out.trace = std::move(loop.trace);
    out.outer_iterations = loop.outer_iterations;
    if (truth) out.certificate = verify_nash(*truth, out.costs, out.values, out.feedback, cfg.tolerances);
    return out;
}

}  // namespace invgame
