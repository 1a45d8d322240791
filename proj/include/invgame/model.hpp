#pragma once

// Game description (A, B_i, C_i), cost parameters (Q_i, R_ij), feedback and
// value profiles, coupled-ARE residuals and the Nash certificate.
//
// Players are indexed from 0 internally; every human-facing message uses
// 1-based names (R_11, C_2, ...).

#include "invgame/numerics.hpp"

#include <string>
#include <vector>

namespace invgame {

struct PlayerChannel {
    Matrix B;  ///< n x m_i
    Matrix C;  ///< p_i x n
};

struct LinearGameSystem {
    Matrix A;
    std::vector<PlayerChannel> players;

    [[nodiscard]] Index n() const { return A.rows(); }
    [[nodiscard]] std::size_t num_players() const { return players.size(); }
    [[nodiscard]] const Matrix& B(std::size_t i) const { return players.at(i).B; }
    [[nodiscard]] const Matrix& C(std::size_t i) const { return players.at(i).C; }
    [[nodiscard]] Index m(std::size_t i) const { return players.at(i).B.cols(); }
    [[nodiscard]] Index p(std::size_t i) const { return players.at(i).C.rows(); }
};

struct CostParameters {
    std::vector<Matrix> Q;               ///< Q[i]: n x n
    std::vector<std::vector<Matrix>> R;  ///< R[i][j]: m_j x m_j

    [[nodiscard]] const Matrix& Rij(std::size_t i, std::size_t j) const { return R.at(i).at(j); }
};

struct FeedbackProfile {
    std::vector<Matrix> K;  ///< K[i]: m_i x p_i
};

struct ValueProfile {
    std::vector<Matrix> X;  ///< X[i]: n x n
};

struct Tolerances {
    double tol_are = 1e-6;    ///< scaled by max(1, ||Q_i||, ||X_i||)
    double tol_exist = 1e-8;  ///< scaled by max(1, ||B_i^T X_i||)
    double sym_tol = 1e-8;
    double hurwitz_margin = kDefaultHurwitzMargin;
};

struct NashCertificate {
    std::vector<double> residual_norms;
    std::vector<double> existence_defects;  ///< ||B_i^T X_i (I - C_i^+ C_i)||
    std::vector<double> gain_defects;       ///< ||K_i C_i - R_ii^{-1} B_i^T X_i||
    double spectral_abscissa = 0.0;
    bool passed = false;
    std::vector<std::string> failures;
};

inline std::string player_name(const std::string& symbol, std::size_t i) {
    return symbol + "_" + std::to_string(i + 1);
}

inline std::string pair_name(const std::string& symbol, std::size_t i, std::size_t j) {
    return symbol + "_" + std::to_string(i + 1) + std::to_string(j + 1);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ValidationOptions {
    bool require_output_coupling = true;  ///< C_i B_i != 0
    double sym_tol = 1e-8;
};

[[nodiscard]] inline bool full_row_rank(const Matrix& c) {
    if (c.rows() == 0 || c.rows() > c.cols()) return false;
    const Eigen::JacobiSVD<Matrix> svd(c);
    const auto& sv = svd.singularValues();
    return sv(0) > 0.0 && sv(sv.size() - 1) > 1e-10 * sv(0);
}

[[nodiscard]] inline std::vector<std::string> validate_system(const LinearGameSystem& sys,
                                                              const ValidationOptions& opt = {}) {
    std::vector<std::string> out;
    const Index n = sys.A.rows();
    if (n == 0 || sys.A.cols() != n) out.push_back("A must be square and non-empty, got " + shape(sys.A));
    if (sys.players.empty()) out.push_back("game has no players");
    for (std::size_t i = 0; i < sys.players.size(); ++i) {
        const auto& ch = sys.players[i];
        if (ch.B.rows() != n || ch.B.cols() < 1)
            out.push_back(player_name("B", i) + " must be n x m with m >= 1, got " + shape(ch.B));
        if (ch.C.cols() != n || ch.C.rows() < 1 || ch.C.rows() > n) {
            out.push_back(player_name("C", i) + " must be p x n with 1 <= p <= n, got " + shape(ch.C));
            continue;
        }
        if (!full_row_rank(ch.C)) out.push_back(player_name("C", i) + " not full row rank");
        if (opt.require_output_coupling && ch.B.rows() == n && (ch.C * ch.B).norm() <= kAbsoluteFloor)
            out.push_back(player_name("C", i) + " " + player_name("B", i) +
                          " is zero (output coupling assumption violated)");
    }
    return out;
}

[[nodiscard]] inline bool positive_definite(const Matrix& m) {
    if (m.rows() != m.cols() || m.size() == 0) return false;
    const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(m), Eigen::EigenvaluesOnly);
    return es.info() == Eigen::Success && es.eigenvalues()(0) > 0.0;
}

[[nodiscard]] inline std::vector<std::string> validate_costs(const LinearGameSystem& sys,
                                                             const CostParameters& costs,
                                                             double sym_tol = 1e-8) {
    std::vector<std::string> out;
    const std::size_t N = sys.num_players();
    const Index n = sys.n();
    if (costs.R.size() != N) {
        out.push_back("R table must have " + std::to_string(N) + " rows");
        return out;
    }
    if (!costs.Q.empty() && costs.Q.size() != N)
        out.push_back("Q list must have " + std::to_string(N) + " entries");
    for (std::size_t i = 0; i < costs.Q.size(); ++i) {
        const auto& q = costs.Q[i];
        if (q.rows() != n || q.cols() != n)
            out.push_back(player_name("Q", i) + " must be n x n, got " + shape(q));
        else if (asymmetry(q) > sym_tol)
            out.push_back(player_name("Q", i) + " not symmetric");
    }
    for (std::size_t i = 0; i < N; ++i) {
        if (costs.R[i].size() != N) {
            out.push_back("R row " + std::to_string(i + 1) + " must have " + std::to_string(N) + " entries");
            continue;
        }
        for (std::size_t j = 0; j < N; ++j) {
            const auto& r = costs.R[i][j];
            const Index mj = sys.players[j].B.cols();
            if (r.rows() != mj || r.cols() != mj) {
                out.push_back(pair_name("R", i, j) + " must be " + std::to_string(mj) + "x" +
                              std::to_string(mj) + ", got " + shape(r));
                continue;
            }
            if (asymmetry(r) > sym_tol) out.push_back(pair_name("R", i, j) + " not symmetric");
            if (i == j && !positive_definite(r)) out.push_back(pair_name("R", i, j) + " not positive definite");
        }
    }
    return out;
}

/// Every dimension, rank, symmetry and definiteness violation as a message.
[[nodiscard]] inline std::vector<std::string> validate_game(const LinearGameSystem& sys,
                                                            const CostParameters& costs,
                                                            const ValidationOptions& opt = {}) {
    auto out = validate_system(sys, opt);
    if (!out.empty() && sys.A.rows() != sys.A.cols()) return out;
    auto more = validate_costs(sys, costs, opt.sym_tol);
    out.insert(out.end(), more.begin(), more.end());
    return out;
}

inline void require_profile(const LinearGameSystem& sys, const FeedbackProfile& fb) {
    require_dims(fb.K.size() == sys.num_players(), "feedback profile has wrong number of players");
    for (std::size_t i = 0; i < fb.K.size(); ++i)
        require_dims(fb.K[i].rows() == sys.m(i) && fb.K[i].cols() == sys.p(i),
                     player_name("K", i) + " must be " + std::to_string(sys.m(i)) + "x" +
                         std::to_string(sys.p(i)) + ", got " + shape(fb.K[i]));
}

inline void require_values(const LinearGameSystem& sys, const ValueProfile& v) {
    require_dims(v.X.size() == sys.num_players(), "value profile has wrong number of players");
    for (std::size_t i = 0; i < v.X.size(); ++i)
        require_dims(v.X[i].rows() == sys.n() && v.X[i].cols() == sys.n(),
                     player_name("X", i) + " must be n x n, got " + shape(v.X[i]));
}

// ---------------------------------------------------------------------------
// Closed loop, gains, residuals
// ---------------------------------------------------------------------------

/// A - sum_i B_i K_i C_i
[[nodiscard]] inline Matrix closed_loop(const LinearGameSystem& sys, const FeedbackProfile& fb) {
    require_profile(sys, fb);
    Matrix acl = sys.A;
    for (std::size_t i = 0; i < fb.K.size(); ++i) acl -= sys.B(i) * fb.K[i] * sys.C(i);
    return acl;
}

/// R_ii^{-1} B_i^T X_i  (the state-feedback gain implied by X_i)
[[nodiscard]] inline Matrix state_gain(const Matrix& B, const Matrix& Rii, const Matrix& X) {
    return Rii.ldlt().solve(B.transpose() * X);
}

/// R_ii^{-1} B_i^T X_i C_i^+
[[nodiscard]] inline Matrix output_gain(const Matrix& B, const Matrix& C, const Matrix& Rii, const Matrix& X) {
    return state_gain(B, Rii, X) * right_pinv(C);
}

[[nodiscard]] inline FeedbackProfile output_gains(const LinearGameSystem& sys, const CostParameters& costs,
                                                  const ValueProfile& v) {
    FeedbackProfile fb;
    for (std::size_t i = 0; i < sys.num_players(); ++i)
        fb.K.push_back(output_gain(sys.B(i), sys.C(i), costs.Rij(i, i), v.X[i]));
    return fb;
}

/// Left side of player i's coupled Riccati equation, term by term.
[[nodiscard]] inline Matrix are_residual(const LinearGameSystem& sys, const CostParameters& costs,
                                         const ValueProfile& values, std::size_t i) {
    require_values(sys, values);
    require_dims(i < sys.num_players(), "are_residual: player index out of range");
    const auto& X = values.X;
    const Matrix& A = sys.A;
    Matrix res = A.transpose() * X[i] + X[i] * A;
    for (std::size_t j = 0; j < sys.num_players(); ++j) {
        const Matrix& Bj = sys.B(j);
        const auto rjj = costs.Rij(j, j).ldlt();
        if (j == i) {
            res -= X[i] * Bj * rjj.solve(Bj.transpose() * X[i]);
            continue;
        }
        const Matrix Sj = rjj.solve(Bj.transpose() * X[j]);  // R_jj^{-1} B_j^T X_j
        res -= X[i] * Bj * Sj;
        res -= X[j] * Bj * rjj.solve(Bj.transpose() * X[i]);
        res += Sj.transpose() * costs.Rij(i, j) * Sj;
    }
    if (!costs.Q.empty()) res += costs.Q.at(i);
    return res;
}

[[nodiscard]] inline double existence_defect(const Matrix& B, const Matrix& C, const Matrix& X) {
    const Index n = X.rows();
    return (B.transpose() * X * (Matrix::Identity(n, n) - right_pinv(C) * C)).norm();
}

[[nodiscard]] inline NashCertificate verify_nash(const LinearGameSystem& sys, const CostParameters& costs,
                                                 const ValueProfile& values, const FeedbackProfile& fb,
                                                 const Tolerances& tol = {}) {
    require_values(sys, values);
    require_profile(sys, fb);
    NashCertificate cert;
    cert.passed = true;
    auto fail = [&](std::string msg) {
        cert.passed = false;
        cert.failures.push_back(std::move(msg));
    };
    for (std::size_t i = 0; i < sys.num_players(); ++i) {
        const Matrix& Xi = values.X[i];
        if (asymmetry(Xi) > tol.sym_tol) fail(player_name("X", i) + " not symmetric");

        const double r = are_residual(sys, costs, values, i).norm();
        cert.residual_norms.push_back(r);
        const double qn = costs.Q.empty() ? 0.0 : costs.Q[i].norm();
        if (!(r <= tol.tol_are * std::max({1.0, qn, Xi.norm()})))
            fail("ARE residual of player " + std::to_string(i + 1) + " = " + std::to_string(r));

        const double scale = std::max(1.0, (sys.B(i).transpose() * Xi).norm());
        const double ex = existence_defect(sys.B(i), sys.C(i), Xi);
        cert.existence_defects.push_back(ex);
        if (!(ex <= tol.tol_exist * scale))
            fail("existence defect of player " + std::to_string(i + 1) + " = " + std::to_string(ex));

        const Matrix S = state_gain(sys.B(i), costs.Rij(i, i), Xi);
        const double gd = (fb.K[i] * sys.C(i) - S).norm();
        cert.gain_defects.push_back(gd);
        if (!(gd <= tol.tol_exist * std::max(1.0, S.norm())))
            fail("gain mismatch K_i C_i != R_ii^-1 B_i^T X_i for player " + std::to_string(i + 1) + " = " +
                 std::to_string(gd));
    }
    const auto rep = stability_report(closed_loop(sys, fb), tol.hurwitz_margin);
    cert.spectral_abscissa = rep.spectral_abscissa;
    if (!rep.is_hurwitz) fail("closed loop not Hurwitz, abscissa " + std::to_string(rep.spectral_abscissa));
    return cert;
}

// ---------------------------------------------------------------------------
// Equivalent costs
// ---------------------------------------------------------------------------

/// Q'_i = Q_i + sum_{j!=i} (K_j C_j)^T dR_ij (K_j C_j),  R'_ij = R_ij - dR_ij.
/// `deltaR[i][j]` must be symmetric and zero on the diagonal blocks.
[[nodiscard]] inline CostParameters generate_equivalent_costs(const LinearGameSystem& sys,
                                                              const CostParameters& costs,
                                                              const FeedbackProfile& fb,
                                                              const std::vector<std::vector<Matrix>>& deltaR,
                                                              double sym_tol = 1e-8) {
    require_profile(sys, fb);
    const std::size_t N = sys.num_players();
    require_dims(deltaR.size() == N, "deltaR must be an N x N table");
    CostParameters out = costs;
    for (std::size_t i = 0; i < N; ++i) {
        require_dims(deltaR[i].size() == N, "deltaR must be an N x N table");
        for (std::size_t j = 0; j < N; ++j) {
            const Matrix& d = deltaR[i][j];
            if (d.size() == 0) continue;
            require_dims(d.rows() == sys.m(j) && d.cols() == sys.m(j),
                         "delta" + pair_name("R", i, j) + " has wrong shape " + shape(d));
            if (i == j) {
                if (d.norm() > 0.0)
                    throw std::invalid_argument("delta" + pair_name("R", i, i) +
                                                " must be zero; own-input weights cannot be traded");
                continue;
            }
            if (asymmetry(d) > sym_tol)
                throw std::invalid_argument("delta" + pair_name("R", i, j) + " not symmetric");
            const Matrix F = fb.K[j] * sys.C(j);
            out.Q[i] += F.transpose() * d * F;
            out.R[i][j] -= d;
        }
        out.Q[i] = symmetrize(out.Q[i]);
    }
    return out;
}

}  // namespace invgame
