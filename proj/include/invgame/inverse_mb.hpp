#pragma once

// Model-based inverse solver: existence correction, gradient loop toward the
// target output gains, and the per-iteration cost update.

#include "invgame/stabilize.hpp"

#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace invgame {

/// Symmetric: B R^{-1} e C^{+T} + C^+ e^T R^{-1} B^T, the gradient of trace(e^T e)
///            over symmetric X.
/// Printed:   the p x p expression C^{+T} B R^{-1} e + e^T R^{-1} B^T C^+ applied to
///            every entry of X. Only defined for p_i = 1.
enum class GradientForm { Symmetric, Printed };

struct SolverConfig {
    std::vector<double> alpha{0.45};  ///< correction step, one per player or a single shared value
    std::vector<double> beta{0.6};    ///< gradient step
    std::vector<double> delta{1e-6};  ///< stop when ||e_i e_i^T|| <= delta_i
    double correction_tol = 1e-10;
    int max_outer = 200;
    int max_inner = 10000;
    GradientForm gradient = GradientForm::Symmetric;
    bool estimate_initial_Q = false;
    bool q_each_iteration = true;
    bool certify_each_iteration = true;
    StabilizeConfig stabilize{};
    Tolerances tolerances{};
};

inline double per_player(const std::vector<double>& v, std::size_t i, const char* name) {
    if (v.empty()) throw std::invalid_argument(std::string("solver config: ") + name + " is empty");
    const double x = v.size() == 1 ? v[0] : v.at(i);
    if (!(x > 0.0)) throw std::invalid_argument(std::string("solver config: ") + name + " must be positive");
    return x;
}

struct IterationRecord {
    int s = 0;
    std::vector<double> error_norms;  ///< ||e_i e_i^T||
    double spectral_abscissa = 0.0;
    std::vector<Matrix> Q;            ///< empty when not computed this iteration
    std::vector<int> correction_iterations;
    std::optional<NashCertificate> certificate;
};

using InverseTrace = std::vector<IterationRecord>;

// ---------------------------------------------------------------------------
// Existence correction
// ---------------------------------------------------------------------------

struct CorrectionResult {
    Matrix X;
    int iterations = 0;
    double defect = 0.0;  ///< final ||B^T X - R K C||
};

/// Gradient of ||B^T X - R_ii K C||^2 over symmetric X: B d + d^T B^T, d = B^T X - R_ii K C.
[[nodiscard]] inline Matrix correction_direction(const Matrix& B, const Matrix& C, const Matrix& Rii, const Matrix& X,
                                                 const Matrix& K) {
    const Matrix d = B.transpose() * X - Rii * K * C;
    return B * d + d.transpose() * B.transpose();
}

/// Gradient descent on ||B^T X - R_ii K C||^2 over symmetric X:
/// X <- X - alpha (B d + d^T B^T), d = B^T X - R_ii K C, until ||d|| <= tol.
[[nodiscard]] inline CorrectionResult correct_value_matrix(const Matrix& B, const Matrix& C, const Matrix& Rii,
                                                           const Matrix& X0, const Matrix& K, double alpha,
                                                           double tol, int max_inner) {
    const Matrix target = Rii * K * C;
    CorrectionResult r{X0, 0, 0.0};
    for (;; ++r.iterations) {
        const Matrix d = B.transpose() * r.X - target;
        r.defect = d.norm();
        if (r.defect <= tol) return r;
        if (!std::isfinite(r.defect) || r.iterations >= max_inner) {
            std::ostringstream os;
            os << "correction did not reach ||B^T X - R K C|| <= " << tol << " in " << max_inner
               << " steps (final " << r.defect << ", alpha " << alpha << ")";
            throw NumericalError("correction", os.str());
        }
        r.X -= alpha * (B * d + d.transpose() * B.transpose());
    }
}

/// Correction with K taken as the output gain implied by X itself.
[[nodiscard]] inline CorrectionResult correct_value_matrix(const Matrix& B, const Matrix& C, const Matrix& Rii,
                                                           const Matrix& X0, double alpha, double tol,
                                                           int max_inner) {
    return correct_value_matrix(B, C, Rii, X0, output_gain(B, C, Rii, X0), alpha, tol, max_inner);
}

[[nodiscard]] inline CorrectionResult correct_value_matrix(const LinearGameSystem& sys, const CostParameters& costs,
                                                           const Matrix& X, const Matrix& K, std::size_t i,
                                                           double alpha, double tol, int max_inner) {
    return correct_value_matrix(sys.B(i), sys.C(i), costs.Rij(i, i), X, K, alpha, tol, max_inner);
}

// ---------------------------------------------------------------------------
// Gradient toward target gains
// ---------------------------------------------------------------------------

/// e = R_ii^{-1} B^T X C^+ - K_d
[[nodiscard]] inline Matrix feedback_error(const Matrix& B, const Matrix& C, const Matrix& Rii, const Matrix& X,
                                           const Matrix& Kd) {
    return output_gain(B, C, Rii, X) - Kd;
}

[[nodiscard]] inline Matrix feedback_error(const LinearGameSystem& sys, const CostParameters& costs,
                                           const Matrix& X, const Matrix& Kd, std::size_t i) {
    return feedback_error(sys.B(i), sys.C(i), costs.Rij(i, i), X, Kd);
}

[[nodiscard]] inline Matrix gradient_direction(const Matrix& B, const Matrix& C, const Matrix& Rii, const Matrix& X,
                                               const Matrix& Kd, GradientForm form = GradientForm::Symmetric) {
    if ((C * B).norm() <= kAbsoluteFloor)
        throw std::invalid_argument("gradient: C_i B_i = 0, the gradient toward the target gain vanishes");
    const Matrix e = feedback_error(B, C, Rii, X, Kd);
    const Matrix Cp = right_pinv(C);
    const Matrix Re = Rii.ldlt().solve(e);  // R^{-1} e
    if (form == GradientForm::Symmetric) {
        const Matrix g = B * Re * Cp.transpose();
        return g + g.transpose();
    }
    if (C.rows() != 1)
        throw std::invalid_argument("gradient: the printed form is only defined for single-output players");
    const Matrix g = Cp.transpose() * B * Re;  // 1 x 1
    const double scalar = 2.0 * g(0, 0);
    return Matrix::Constant(X.rows(), X.cols(), scalar);
}

[[nodiscard]] inline Matrix gradient_step(const Matrix& B, const Matrix& C, const Matrix& Rii, const Matrix& X,
                                          const Matrix& Kd, double beta,
                                          GradientForm form = GradientForm::Symmetric) {
    return X - beta * gradient_direction(B, C, Rii, X, Kd, form);
}

[[nodiscard]] inline Matrix gradient_step(const LinearGameSystem& sys, const CostParameters& costs,
                                          const Matrix& X, const Matrix& Kd, std::size_t i, double beta,
                                          GradientForm form = GradientForm::Symmetric) {
    return gradient_step(sys.B(i), sys.C(i), costs.Rij(i, i), X, Kd, beta, form);
}

// ---------------------------------------------------------------------------
// Cost update
// ---------------------------------------------------------------------------

/// Q_i = -sum_j (K_j C_j)^T R_ij (K_j C_j) - A_cl^T X_i - X_i A_cl
[[nodiscard]] inline Matrix update_cost_Q(const LinearGameSystem& sys, const CostParameters& costs,
                                          const ValueProfile& values, const FeedbackProfile& fb, std::size_t i) {
    const Matrix acl = closed_loop(sys, fb);
    Matrix q = -acl.transpose() * values.X.at(i) - values.X.at(i) * acl;
    for (std::size_t j = 0; j < sys.num_players(); ++j) {
        const Matrix F = fb.K[j] * sys.C(j);
        q -= F.transpose() * costs.Rij(i, j) * F;
    }
    return symmetrize(q);
}

[[nodiscard]] inline std::vector<Matrix> update_cost_Q(const LinearGameSystem& sys, const CostParameters& costs,
                                                       const ValueProfile& values, const FeedbackProfile& fb) {
    std::vector<Matrix> out;
    for (std::size_t i = 0; i < sys.num_players(); ++i) out.push_back(update_cost_Q(sys, costs, values, fb, i));
    return out;
}

// ---------------------------------------------------------------------------
// Gradient loop shared by the model-based and model-free pipelines
// ---------------------------------------------------------------------------

struct GradientLoopHooks {
    /// Q for the current iterate; called each iteration when q_each_iteration, and once at exit.
    std::function<std::vector<Matrix>(const ValueProfile&, const FeedbackProfile&)> update_Q;
    /// Spectral abscissa of the closed loop under the current gains; optional.
    std::function<double(const FeedbackProfile&)> abscissa;
    /// Certificate of the current iterate; optional.
    std::function<NashCertificate(const std::vector<Matrix>& Q, const ValueProfile&, const FeedbackProfile&)>
        certify;
    bool abort_on_instability = true;
};

struct GradientLoopResult {
    ValueProfile values;
    FeedbackProfile feedback;
    std::vector<Matrix> Q;
    InverseTrace trace;
    int outer_iterations = 0;
};

[[nodiscard]] inline double error_norm(const Matrix& e) { return (e * e.transpose()).norm(); }

/// Gradient loop starting from corrected values X^(0). B may be estimated.
[[nodiscard]] inline GradientLoopResult run_gradient_loop(const std::vector<Matrix>& B, const std::vector<Matrix>& C,
                                                          const CostParameters& costs,
                                                          const std::vector<Matrix>& K_target, ValueProfile X,
                                                          const SolverConfig& cfg, const GradientLoopHooks& hooks) {
    const std::size_t N = B.size();
    GradientLoopResult out;

    auto gains = [&](const ValueProfile& v) {
        FeedbackProfile fb;
        for (std::size_t i = 0; i < N; ++i) fb.K.push_back(output_gain(B[i], C[i], costs.Rij(i, i), v.X[i]));
        return fb;
    };
    auto errors = [&](const FeedbackProfile& fb, bool& done) {
        std::vector<double> norms;
        done = true;
        for (std::size_t i = 0; i < N; ++i) {
            norms.push_back(error_norm(fb.K[i] - K_target[i]));
            if (!(norms.back() <= per_player(cfg.delta, i, "delta"))) done = false;
        }
        return norms;
    };
    auto fill_record = [&](IterationRecord& rec, const ValueProfile& v, const FeedbackProfile& fb, bool with_q) {
        if (hooks.abscissa) rec.spectral_abscissa = hooks.abscissa(fb);
        if (with_q && hooks.update_Q) {
            rec.Q = hooks.update_Q(v, fb);
            if (hooks.certify && cfg.certify_each_iteration) rec.certificate = hooks.certify(rec.Q, v, fb);
        }
    };

    FeedbackProfile fb = gains(X);
    bool done = false;
    IterationRecord rec0;
    rec0.s = 0;
    rec0.error_norms = errors(fb, done);
    fill_record(rec0, X, fb, cfg.estimate_initial_Q || done);
    out.trace.push_back(rec0);

    int s = 0;
    while (!done) {
        if (s >= cfg.max_outer) {
            std::ostringstream os;
            os << "gradient loop did not reach ||e e^T|| <= delta in " << cfg.max_outer << " iterations";
            throw NumericalError("gradient", os.str());
        }
        ++s;
        IterationRecord rec;
        rec.s = s;
        for (std::size_t i = 0; i < N; ++i) {
            const Matrix& Rii = costs.Rij(i, i);
            const Matrix stepped =
                gradient_step(B[i], C[i], Rii, X.X[i], K_target[i], per_player(cfg.beta, i, "beta"), cfg.gradient);
            const auto corr = correct_value_matrix(B[i], C[i], Rii, stepped, per_player(cfg.alpha, i, "alpha"),
                                                   cfg.correction_tol, cfg.max_inner);
            X.X[i] = symmetrize(corr.X);
            rec.correction_iterations.push_back(corr.iterations);
        }
        fb = gains(X);
        rec.error_norms = errors(fb, done);
        if (hooks.abscissa) {
            rec.spectral_abscissa = hooks.abscissa(fb);
            if (hooks.abort_on_instability && !(rec.spectral_abscissa < 0.0)) {
                std::ostringstream os;
                os << "stability lost at s=" << s << " (spectral abscissa " << rec.spectral_abscissa
                   << "); reduce beta";
                throw NumericalError("gradient", os.str());
            }
        }
        fill_record(rec, X, fb, cfg.q_each_iteration || done);
        out.trace.push_back(rec);
    }
    out.outer_iterations = s;
    out.values = X;
    out.feedback = fb;
    if (hooks.update_Q) out.Q = out.trace.back().Q.empty() ? hooks.update_Q(X, fb) : out.trace.back().Q;
    return out;
}

// ---------------------------------------------------------------------------
// Full model-based pipeline
// ---------------------------------------------------------------------------

struct InverseResult {
    CostParameters costs;
    ValueProfile values;
    FeedbackProfile feedback;
    InverseTrace trace;
    StabilizationResult stabilization;
    ValueProfile corrected_initial;
    NashCertificate certificate;
    int outer_iterations = 0;
};

[[nodiscard]] inline std::vector<Matrix> target_state_gains(const std::vector<Matrix>& C,
                                                            const std::vector<Matrix>& K_target) {
    std::vector<Matrix> F;
    for (std::size_t j = 0; j < C.size(); ++j) F.push_back(K_target[j] * C[j]);
    return F;
}

[[nodiscard]] inline std::vector<Matrix> channel_B(const LinearGameSystem& sys) {
    std::vector<Matrix> out;
    for (const auto& p : sys.players) out.push_back(p.B);
    return out;
}

[[nodiscard]] inline std::vector<Matrix> channel_C(const LinearGameSystem& sys) {
    std::vector<Matrix> out;
    for (const auto& p : sys.players) out.push_back(p.C);
    return out;
}

[[nodiscard]] inline InverseResult solve_inverse_model_based(const LinearGameSystem& sys,
                                                             const CostParameters& R_init,
                                                             const FeedbackProfile& K_target,
                                                             const SolverConfig& cfg = {}) {
    require_profile(sys, K_target);
    const auto violations = validate_game(sys, CostParameters{{}, R_init.R});
    if (!violations.empty()) throw std::invalid_argument("invalid game: " + violations.front());
    const auto target = stability_report(closed_loop(sys, K_target), cfg.tolerances.hurwitz_margin);
    if (!target.is_hurwitz) throw std::invalid_argument("target output-feedback profile is not stabilizing");

    InverseResult out;
    out.costs.R = R_init.R;
    const auto B = channel_B(sys);
    const auto C = channel_C(sys);

    out.stabilization = run_stabilization(sys, out.costs, target_state_gains(C, K_target.K), cfg.stabilize);

    ValueProfile X0;
    for (std::size_t i = 0; i < sys.num_players(); ++i) {
        const auto corr = correct_value_matrix(sys, out.costs, out.stabilization.values.X[i],
                                               out.stabilization.feedback.K[i], i, per_player(cfg.alpha, i, "alpha"),
                                               cfg.correction_tol, cfg.max_inner);
        X0.X.push_back(symmetrize(corr.X));
    }
    out.corrected_initial = X0;

    GradientLoopHooks hooks;
    hooks.update_Q = [&](const ValueProfile& v, const FeedbackProfile& fb) {
        return update_cost_Q(sys, out.costs, v, fb);
    };
    hooks.abscissa = [&](const FeedbackProfile& fb) { return spectral_abscissa(closed_loop(sys, fb)); };
    hooks.certify = [&](const std::vector<Matrix>& Q, const ValueProfile& v, const FeedbackProfile& fb) {
        return verify_nash(sys, CostParameters{Q, out.costs.R}, v, fb, cfg.tolerances);
    };

    auto loop = run_gradient_loop(B, C, out.costs, K_target.K, X0, cfg, hooks);
    out.values = std::move(loop.values);
    out.feedback = std::move(loop.feedback);
    out.costs.Q = std::move(loop.Q);
    out.trace = std::move(loop.trace);
    out.outer_iterations = loop.outer_iterations;
    out.certificate = verify_nash(sys, out.costs, out.values, out.feedback, cfg.tolerances);
    return out;
}

}  // namespace invgame
