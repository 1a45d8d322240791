#pragma once

// Dense linear-algebra kernels shared by every solver in the library:
// Kronecker/vec/hat utilities, Lyapunov solving by Kronecker vectorization,
// right pseudo-inverse, Hurwitz test and least squares with diagnostics.
//
// vec() is column-major stacking throughout, so that
//   (c^T kron a^T) vec(B) = a^T B c.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace invgame {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Raised when a numerical stage cannot produce a trustworthy answer.
/// `stage` names the pipeline step so callers can report where it broke.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}

    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Least-squares regressor without full column rank.
class RankDeficientError : public NumericalError {
public:
    RankDeficientError(std::string stage, const std::string& what, Index rank, Index cols,
                       std::vector<double> singular_values)
        : NumericalError(std::move(stage), what),
          rank_(rank),
          cols_(cols),
          singular_values_(std::move(singular_values)) {}

    [[nodiscard]] Index rank() const noexcept { return rank_; }
    [[nodiscard]] Index cols() const noexcept { return cols_; }
    [[nodiscard]] const std::vector<double>& singular_values() const noexcept { return singular_values_; }

private:
    Index rank_;
    Index cols_;
    std::vector<double> singular_values_;
};

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr double kAbsoluteFloor = 1e-12;

inline void require_dims(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

inline std::string shape(const Matrix& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

// ---------------------------------------------------------------------------
// Kronecker / vec
// ---------------------------------------------------------------------------

[[nodiscard]] inline Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

[[nodiscard]] inline Vector vec(const Matrix& m) {
    return Eigen::Map<const Vector>(m.data(), m.size());
}

[[nodiscard]] inline Matrix unvec(const Vector& v, Index rows, Index cols) {
    require_dims(v.size() == rows * cols, "unvec: length does not match requested shape");
    return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

[[nodiscard]] inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

/// ||M - M^T||_F relative to max(1, ||M||_F).
[[nodiscard]] inline double asymmetry(const Matrix& m) {
    if (m.rows() != m.cols()) return std::numeric_limits<double>::infinity();
    return (m - m.transpose()).norm() / std::max(1.0, m.norm());
}

// ---------------------------------------------------------------------------
// Hat encoding of symmetric matrices
// ---------------------------------------------------------------------------

[[nodiscard]] inline Index hat_size(Index n) { return n * (n + 1) / 2; }

/// Symmetric n x n matrix packed as
/// [D11, 2 D12, ..., 2 D1n, D22, 2 D23, ..., Dnn].
struct HatVector {
    Vector entries;
    Index n = 0;
};

[[nodiscard]] inline HatVector hat(const Matrix& m, double sym_tol = 1e-8) {
    require_dims(m.rows() == m.cols(), "hat: matrix must be square, got " + shape(m));
    if (asymmetry(m) > sym_tol)
        throw std::invalid_argument("hat: matrix is not symmetric within tolerance");
    const Index n = m.rows();
    HatVector h{Vector(hat_size(n)), n};
    Index k = 0;
    for (Index i = 0; i < n; ++i) {
        h.entries(k++) = m(i, i);
        for (Index j = i + 1; j < n; ++j) h.entries(k++) = m(i, j) + m(j, i);
    }
    return h;
}

[[nodiscard]] inline Matrix unhat(const HatVector& h) {
    require_dims(h.entries.size() == hat_size(h.n), "unhat: length does not match n(n+1)/2");
    Matrix m(h.n, h.n);
    Index k = 0;
    for (Index i = 0; i < h.n; ++i) {
        m(i, i) = h.entries(k++);
        for (Index j = i + 1; j < h.n; ++j) {
            m(i, j) = m(j, i) = 0.5 * h.entries(k++);
        }
    }
    return m;
}

[[nodiscard]] inline Matrix unhat(const Vector& entries, Index n) { return unhat(HatVector{entries, n}); }

/// Monomials [x1^2, x1 x2, ..., x1 xn, x2^2, ..., xn^2]; x^T M x = hat_state(x) . hat(M).
[[nodiscard]] inline Vector hat_state(const Vector& x) {
    const Index n = x.size();
    Vector out(hat_size(n));
    Index k = 0;
    for (Index i = 0; i < n; ++i)
        for (Index j = i; j < n; ++j) out(k++) = x(i) * x(j);
    return out;
}

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

struct StabilityReport {
    double spectral_abscissa = 0.0;
    bool is_hurwitz = false;
    std::vector<std::complex<double>> eigenvalues;
};

inline constexpr double kDefaultHurwitzMargin = 1e-9;

[[nodiscard]] inline StabilityReport stability_report(const Matrix& f,
                                                      double margin = kDefaultHurwitzMargin) {
    require_dims(f.rows() == f.cols(), "stability_report: matrix must be square, got " + shape(f));
    StabilityReport report;
    if (f.size() == 0) {
        report.spectral_abscissa = -std::numeric_limits<double>::infinity();
        report.is_hurwitz = true;
        return report;
    }
    Eigen::EigenSolver<Matrix> solver(f, /*computeEigenvectors=*/false);
    if (solver.info() != Eigen::Success)
        throw NumericalError("stability_report", "eigensolver did not converge");
    report.spectral_abscissa = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < solver.eigenvalues().size(); ++i) {
        const auto lambda = solver.eigenvalues()(i);
        report.eigenvalues.push_back(lambda);
        report.spectral_abscissa = std::max(report.spectral_abscissa, lambda.real());
    }
    report.is_hurwitz = report.spectral_abscissa < -margin;
    return report;
}

[[nodiscard]] inline double spectral_abscissa(const Matrix& f) {
    return stability_report(f).spectral_abscissa;
}

// ---------------------------------------------------------------------------
// Lyapunov equation  F^T P + P F = -Rhs
// ---------------------------------------------------------------------------

inline constexpr double kMaxOperatorCondition = 1e12;

/// Solves F^T P + P F + Rhs = 0 through the n^2 x n^2 Kronecker system
/// (I kron F^T + F^T kron I) vec(P) = -vec(Rhs). O(n^6); intended for n <= 10.
[[nodiscard]] inline Matrix solve_lyapunov(const Matrix& f, const Matrix& rhs) {
    require_dims(f.rows() == f.cols(), "solve_lyapunov: F must be square, got " + shape(f));
    require_dims(rhs.rows() == f.rows() && rhs.cols() == f.cols(),
                 "solve_lyapunov: Rhs must match F, got " + shape(rhs));
    const Index n = f.rows();
    const Matrix id = Matrix::Identity(n, n);
    const Matrix ft = f.transpose();
    const Matrix op = kron(id, ft) + kron(ft, id);

    const Eigen::PartialPivLU<Matrix> lu(op);
    // rcond() can miss an exactly zero pivot, so check the pivots as well
    const auto piv = lu.matrixLU().diagonal().cwiseAbs();
    const double rcond = std::min(lu.rcond(), piv.minCoeff() / piv.maxCoeff());
    if (!(rcond * kMaxOperatorCondition > 1.0)) {
        // Operator eigenvalues are lambda_a + lambda_b; name the pair closest to zero.
        Eigen::EigenSolver<Matrix> es(f, false);
        double closest = std::numeric_limits<double>::infinity();
        std::complex<double> la, lb;
        for (Index a = 0; a < n; ++a)
            for (Index b = 0; b < n; ++b) {
                const auto s = es.eigenvalues()(a) + es.eigenvalues()(b);
                if (std::abs(s) < closest) {
                    closest = std::abs(s);
                    la = es.eigenvalues()(a);
                    lb = es.eigenvalues()(b);
                }
            }
        std::ostringstream os;
        os << "Lyapunov operator is singular or ill-conditioned (rcond=" << rcond
           << "); eigenvalue pair " << la << " + " << lb << " sums to " << (la + lb);
        throw NumericalError("solve_lyapunov", os.str());
    }
    const Vector p = lu.solve(-vec(rhs));
    return symmetrize(unvec(p, n, n));
}

// ---------------------------------------------------------------------------
// Right pseudo-inverse  C^+ = C^T (C C^T)^{-1}
// ---------------------------------------------------------------------------

[[nodiscard]] inline Matrix right_pinv(const Matrix& c) {
    require_dims(c.rows() >= 1 && c.cols() >= c.rows(),
                 "right_pinv: C must be p x n with p <= n, got " + shape(c));
    const Matrix gram = c * c.transpose();
    const Eigen::JacobiSVD<Matrix> svd(gram);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    const double smin = sv(sv.size() - 1);
    if (!(smax > 0.0) || smin * kMaxOperatorCondition <= smax)
        throw NumericalError("right_pinv", "C is not of full row rank (C C^T singular)");
    return c.transpose() * gram.ldlt().solve(Matrix::Identity(c.rows(), c.rows()));
}

// ---------------------------------------------------------------------------
// Least squares with diagnostics
// ---------------------------------------------------------------------------

struct LeastSquaresResult {
    Matrix solution;
    double residual_norm = 0.0;  ///< ||H theta - Xi||_F
    double rhs_norm = 0.0;       ///< ||Xi||_F
    double condition = 0.0;      ///< of the column-equilibrated regressor
    Index rank = 0;
    std::vector<double> singular_values;  ///< of the column-equilibrated regressor
};

inline constexpr double kRankTolerance = 1e-11;

/// min ||H theta - Xi||_F by column-pivoted Householder QR on the
/// column-equilibrated regressor. Throws RankDeficientError when H lacks full
/// column rank (insufficient excitation in the data-driven equations).
[[nodiscard]] inline LeastSquaresResult lstsq(const Matrix& h, const Matrix& xi,
                                              const std::string& stage = "lstsq") {
    require_dims(h.rows() == xi.rows(), "lstsq: H and Xi row counts differ (" + shape(h) + " vs " +
                                            shape(xi) + ")");
    const Index q = h.cols();
    LeastSquaresResult out;
    out.rhs_norm = xi.norm();

    Vector scale(q);
    for (Index j = 0; j < q; ++j) {
        const double nj = h.col(j).norm();
        scale(j) = nj > 0.0 ? 1.0 / nj : 0.0;
    }
    const Matrix hs = h * scale.asDiagonal();

    Eigen::JacobiSVD<Matrix> svd;
    if (h.rows() >= q) {
        const Eigen::HouseholderQR<Matrix> qr_only(hs);
        const Matrix r = qr_only.matrixQR().topRows(q).triangularView<Eigen::Upper>();
        svd.compute(r);
    } else {
        svd.compute(hs);
    }
    const auto& sv = svd.singularValues();
    for (Index k = 0; k < sv.size(); ++k) out.singular_values.push_back(sv(k));
    const double smax = sv.size() > 0 ? sv(0) : 0.0;
    out.rank = 0;
    for (Index k = 0; k < sv.size(); ++k)
        if (sv(k) > kRankTolerance * std::max<double>(1.0, smax)) ++out.rank;
    const double smin = sv.size() == q && q > 0 ? sv(q - 1) : 0.0;
    out.condition = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();

    if (out.rank < q || h.rows() < q) {
        std::ostringstream os;
        os << "regressor has rank " << out.rank << " < " << q
           << " unknowns (rows=" << h.rows() << ", smallest scaled singular value=" << smin
           << "); data is not persistently exciting";
        throw RankDeficientError(stage, os.str(), out.rank, q, out.singular_values);
    }

    const Eigen::ColPivHouseholderQR<Matrix> qr(hs);
    out.solution = scale.asDiagonal() * qr.solve(xi);
    out.residual_norm = (h * out.solution - xi).norm();
    return out;
}

}  // namespace invgame
