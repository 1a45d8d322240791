#pragma once

// Noisy closed-loop simulation and the batch data matrices used by every
// model-free equation.

#include "invgame/model.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace invgame {

struct NoiseSpec {
    double amplitude = 100.0;
    int num_terms = 1000;
    double freq_low = -500.0;
    double freq_high = 500.0;
    std::uint64_t seed = 1;
};

inline void validate_noise(const NoiseSpec& spec) {
    if (!(spec.amplitude >= 0.0)) throw std::invalid_argument("noise amplitude must be >= 0");
    if (spec.num_terms < 0) throw std::invalid_argument("noise num_terms must be >= 0");
    if (!(spec.freq_low < spec.freq_high)) throw std::invalid_argument("noise frequency range must have low < high");
}

/// omega(t) = amplitude * sum_k sin(r_k t), frequencies drawn once per channel.
class ExplorationNoise {
public:
    ExplorationNoise() = default;

    ExplorationNoise(const NoiseSpec& spec, Index channels) : amplitude_(spec.amplitude) {
        validate_noise(spec);
        std::mt19937_64 rng(spec.seed);
        std::uniform_real_distribution<double> dist(spec.freq_low, spec.freq_high);
        freqs_.resize(static_cast<std::size_t>(channels));
        for (auto& f : freqs_) {
            f.resize(static_cast<std::size_t>(spec.num_terms));
            for (auto& r : f) r = dist(rng);
        }
    }

    [[nodiscard]] Vector operator()(double t) const {
        Vector w = Vector::Zero(static_cast<Index>(freqs_.size()));
        if (amplitude_ == 0.0) return w;
        for (std::size_t c = 0; c < freqs_.size(); ++c) {
            double acc = 0.0;
            for (double r : freqs_[c]) acc += std::sin(r * t);
            w(static_cast<Index>(c)) = amplitude_ * acc;
        }
        return w;
    }

    [[nodiscard]] Index channels() const { return static_cast<Index>(freqs_.size()); }
    [[nodiscard]] const std::vector<std::vector<double>>& frequencies() const { return freqs_; }

private:
    double amplitude_ = 0.0;
    std::vector<std::vector<double>> freqs_;
};

[[nodiscard]] inline ExplorationNoise make_noise(const NoiseSpec& spec, Index channels = 1) {
    return ExplorationNoise(spec, channels);
}

/// States and inputs sampled on a uniform fine grid. `player_ids` names the
/// players whose inputs were recorded, in the order of `inputs`.
struct TrajectoryLog {
    double dt_fine = 0.0;
    std::vector<double> times;
    Matrix states;                ///< n x L
    std::vector<Matrix> inputs;   ///< inputs[k]: m x L
    std::vector<std::size_t> player_ids;

    [[nodiscard]] Index length() const { return states.cols(); }
};

class DivergenceError : public NumericalError {
public:
    explicit DivergenceError(const std::string& what) : NumericalError("simulate", what) {}
};

inline constexpr double kOverflowGuard = 1e12;

/// Control law evaluated inside every integrator stage: returns u_j for all players.
using InputPolicy = std::function<std::vector<Vector>(double t, const Vector& x)>;

/// Fixed-step RK4 of x' = A x + sum_j B_j u_j(t, x), logging x and the inputs of
/// `record` at every grid point.
[[nodiscard]] inline TrajectoryLog simulate_policy(const LinearGameSystem& sys, const InputPolicy& policy,
                                                   const Vector& x0, double t0, double dt_fine, long steps,
                                                   const std::vector<std::size_t>& record) {
    require_dims(x0.size() == sys.n(), "simulate: x0 must have n entries");
    if (!(dt_fine > 0.0)) throw std::invalid_argument("simulate: dt_fine must be positive");
    const std::size_t N = sys.num_players();
    auto rhs = [&](double t, const Vector& x, std::vector<Vector>* u_out) {
        auto u = policy(t, x);
        Vector dx = sys.A * x;
        for (std::size_t j = 0; j < N; ++j) dx += sys.B(j) * u[j];
        if (u_out) *u_out = std::move(u);
        return dx;
    };

    TrajectoryLog log;
    log.dt_fine = dt_fine;
    log.player_ids = record;
    log.times.resize(static_cast<std::size_t>(steps + 1));
    log.states.resize(sys.n(), steps + 1);
    for (auto id : record) log.inputs.emplace_back(sys.m(id), steps + 1);

    Vector x = x0;
    std::vector<Vector> u;
    for (long k = 0; k <= steps; ++k) {
        const double t = t0 + static_cast<double>(k) * dt_fine;
        const Vector k1 = rhs(t, x, &u);
        log.times[static_cast<std::size_t>(k)] = t;
        log.states.col(k) = x;
        for (std::size_t r = 0; r < record.size(); ++r) log.inputs[r].col(k) = u[record[r]];
        if (k == steps) break;
        const Vector k2 = rhs(t + 0.5 * dt_fine, x + 0.5 * dt_fine * k1, nullptr);
        const Vector k3 = rhs(t + 0.5 * dt_fine, x + 0.5 * dt_fine * k2, nullptr);
        const Vector k4 = rhs(t + dt_fine, x + dt_fine * k3, nullptr);
        x += dt_fine / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!x.allFinite() || x.norm() > kOverflowGuard) {
            std::ostringstream os;
            os << "state norm exceeded " << kOverflowGuard << " at t=" << t + dt_fine;
            throw DivergenceError(os.str());
        }
    }
    return log;
}

/// u_j = -K_j C_j x + omega_j(t), all players recorded.
[[nodiscard]] inline TrajectoryLog simulate(const LinearGameSystem& sys, const FeedbackProfile& fb,
                                            const std::vector<ExplorationNoise>& noise, const Vector& x0,
                                            double dt_fine, double T) {
    require_profile(sys, fb);
    const std::size_t N = sys.num_players();
    require_dims(noise.empty() || noise.size() == N, "simulate: one noise source per player");
    std::vector<Matrix> F;
    for (std::size_t j = 0; j < N; ++j) F.push_back(fb.K[j] * sys.C(j));
    InputPolicy policy = [&](double t, const Vector& x) {
        std::vector<Vector> u(N);
        for (std::size_t j = 0; j < N; ++j) {
            u[j] = -F[j] * x;
            if (!noise.empty() && noise[j].channels() > 0) u[j] += noise[j](t);
        }
        return u;
    };
    const long steps = std::lround(T / dt_fine);
    std::vector<std::size_t> all(N);
    for (std::size_t j = 0; j < N; ++j) all[j] = j;
    return simulate_policy(sys, policy, x0, 0.0, dt_fine, steps, all);
}

// ---------------------------------------------------------------------------
// Data matrices
// ---------------------------------------------------------------------------

struct DataMatrices {
    Matrix delta_xx;            ///< s x n(n+1)/2
    Matrix I_xx;                ///< s x n^2
    std::vector<Matrix> I_xu;   ///< per recorded player, s x (n m_j)
    Matrix I_qx;                ///< s x n(n+1)/2
    std::vector<std::size_t> player_ids;
    Index excitation_rank = 0;
    Index n = 0;
    double delta_t = 0.0;

    [[nodiscard]] Index rows() const { return delta_xx.rows(); }
    [[nodiscard]] Index required_rank() const {
        Index r = hat_size(n);
        for (const auto& m : I_xu) r += m.cols();
        return r;
    }
    /// Block of player `id` (global index) in I_xu.
    [[nodiscard]] const Matrix& xu(std::size_t id) const {
        for (std::size_t k = 0; k < player_ids.size(); ++k)
            if (player_ids[k] == id) return I_xu[k];
        throw std::out_of_range("data matrices hold no input block for player " + std::to_string(id + 1));
    }
};

[[nodiscard]] inline Index minimum_intervals(Index n, const std::vector<Index>& m) {
    Index r = hat_size(n);
    for (auto mj : m) r += n * mj;
    return r;
}

[[nodiscard]] inline Index compute_excitation_rank(const DataMatrices& d) {
    Index cols = d.I_qx.cols();
    for (const auto& m : d.I_xu) cols += m.cols();
    Matrix H(d.rows(), cols);
    H.leftCols(d.I_qx.cols()) = d.I_qx;
    Index c = d.I_qx.cols();
    for (const auto& m : d.I_xu) {
        H.middleCols(c, m.cols()) = m;
        c += m.cols();
    }
    for (Index j = 0; j < H.cols(); ++j) {
        const double nj = H.col(j).norm();
        if (nj > 0.0) H.col(j) /= nj;
    }
    const Eigen::JacobiSVD<Matrix> svd(H);
    const auto& sv = svd.singularValues();
    Index r = 0;
    for (Index k = 0; k < sv.size(); ++k)
        if (sv(k) > kRankTolerance * std::max(1.0, sv(0))) ++r;
    return r;
}

/// Rows per interval [t_{l-1}, t_l] of width delta_t: hat_state differences,
/// and composite-trapezoid integrals of x kron x, x kron u_j and hat_state(x).
[[nodiscard]] inline DataMatrices assemble_data(const TrajectoryLog& log, double delta_t, Index min_intervals = 0) {
    const Index n = log.states.rows();
    const Index L = log.length();
    if (!(log.dt_fine > 0.0) || L < 2) throw std::invalid_argument("assemble_data: empty log");
    const double ratio = delta_t / log.dt_fine;
    const long stride = std::lround(ratio);
    if (stride < 1 || std::abs(ratio - static_cast<double>(stride)) > 1e-6 * ratio)
        throw std::invalid_argument("assemble_data: delta_t must be a multiple of dt_fine");
    const Index s = (L - 1) / stride;

    std::vector<Index> ms;
    for (const auto& u : log.inputs) ms.push_back(u.rows());
    const Index needed = std::max(min_intervals, minimum_intervals(n, ms));
    if (s < needed) {
        std::ostringstream os;
        os << "too few intervals: " << s << " available, at least " << needed << " required";
        throw std::invalid_argument("assemble_data: " + os.str());
    }

    DataMatrices d;
    d.n = n;
    d.delta_t = static_cast<double>(stride) * log.dt_fine;
    d.player_ids = log.player_ids;
    d.delta_xx.resize(s, hat_size(n));
    d.I_xx = Matrix::Zero(s, n * n);
    d.I_qx = Matrix::Zero(s, hat_size(n));
    for (auto m : ms) d.I_xu.push_back(Matrix::Zero(s, n * m));

    const double h = log.dt_fine;
    for (Index l = 0; l < s; ++l) {
        const Index a = l * stride;
        const Index b = a + stride;
        d.delta_xx.row(l) = (hat_state(log.states.col(b)) - hat_state(log.states.col(a))).transpose();
        for (Index k = a; k <= b; ++k) {
            const double w = (k == a || k == b) ? 0.5 * h : h;
            const Vector x = log.states.col(k);
            d.I_xx.row(l) += w * kron(x, x).transpose();
            d.I_qx.row(l) += w * hat_state(x).transpose();
            for (std::size_t j = 0; j < log.inputs.size(); ++j)
                d.I_xu[j].row(l) += w * kron(x, Vector(log.inputs[j].col(k))).transpose();
        }
    }
    d.excitation_rank = compute_excitation_rank(d);
    return d;
}

/// Data matrices from an augmented-state integration: the integrals are carried
/// as extra states of the same RK4 scheme, so they are as accurate as the state
/// itself. Intended for smooth excitation and tight cross-pipeline checks.
[[nodiscard]] inline DataMatrices exact_integral_data(const LinearGameSystem& sys, const InputPolicy& policy,
                                                      const Vector& x0, double delta_t, Index intervals,
                                                      int substeps) {
    const Index n = sys.n();
    const std::size_t N = sys.num_players();
    require_dims(x0.size() == n, "exact_integral_data: x0 must have n entries");
    if (intervals < 1 || substeps < 1 || !(delta_t > 0.0))
        throw std::invalid_argument("exact_integral_data: bad grid");

    Index dim = n + n * n + hat_size(n);
    std::vector<Index> off(N);
    for (std::size_t j = 0; j < N; ++j) {
        off[j] = dim;
        dim += n * sys.m(j);
    }
    auto f = [&](double t, const Vector& z) {
        const Vector x = z.head(n);
        const auto u = policy(t, x);
        Vector dz(dim);
        Vector dx = sys.A * x;
        for (std::size_t j = 0; j < N; ++j) dx += sys.B(j) * u[j];
        dz.head(n) = dx;
        dz.segment(n, n * n) = kron(x, x);
        dz.segment(n + n * n, hat_size(n)) = hat_state(x);
        for (std::size_t j = 0; j < N; ++j) dz.segment(off[j], n * sys.m(j)) = kron(x, u[j]);
        return dz;
    };

    DataMatrices d;
    d.n = n;
    d.delta_t = delta_t;
    d.delta_xx.resize(intervals, hat_size(n));
    d.I_xx.resize(intervals, n * n);
    d.I_qx.resize(intervals, hat_size(n));
    for (std::size_t j = 0; j < N; ++j) {
        d.I_xu.emplace_back(intervals, n * sys.m(j));
        d.player_ids.push_back(j);
    }
    const double h = delta_t / substeps;
    Vector x = x0;
    double t = 0.0;
    for (Index l = 0; l < intervals; ++l) {
        Vector z = Vector::Zero(dim);
        z.head(n) = x;
        for (int k = 0; k < substeps; ++k) {
            const Vector k1 = f(t, z);
            const Vector k2 = f(t + 0.5 * h, z + 0.5 * h * k1);
            const Vector k3 = f(t + 0.5 * h, z + 0.5 * h * k2);
            const Vector k4 = f(t + h, z + h * k3);
            z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t = static_cast<double>(l) * delta_t + static_cast<double>(k + 1) * h;
        }
        const Vector xn = z.head(n);
        if (!xn.allFinite() || xn.norm() > kOverflowGuard)
            throw DivergenceError("exact_integral_data: state diverged");
        d.delta_xx.row(l) = (hat_state(xn) - hat_state(x)).transpose();
        d.I_xx.row(l) = z.segment(n, n * n).transpose();
        d.I_qx.row(l) = z.segment(n + n * n, hat_size(n)).transpose();
        for (std::size_t j = 0; j < N; ++j) d.I_xu[j].row(l) = z.segment(off[j], n * sys.m(j)).transpose();
        x = xn;
    }
    d.excitation_rank = compute_excitation_rank(d);
    return d;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Columns: t, x1..xn, then u<player>_<channel> for every recorded player (1-based).
inline void write_trajectory_csv(std::ostream& os, const TrajectoryLog& log) {
    os << "t";
    for (Index i = 0; i < log.states.rows(); ++i) os << ",x" << i + 1;
    for (std::size_t r = 0; r < log.inputs.size(); ++r)
        for (Index c = 0; c < log.inputs[r].rows(); ++c) os << ",u" << log.player_ids[r] + 1 << "_" << c + 1;
    os << "\n";
    os.precision(17);
    for (Index k = 0; k < log.length(); ++k) {
        os << log.times[static_cast<std::size_t>(k)];
        for (Index i = 0; i < log.states.rows(); ++i) os << "," << log.states(i, k);
        for (const auto& u : log.inputs)
            for (Index c = 0; c < u.rows(); ++c) os << "," << u(c, k);
        os << "\n";
    }
}

[[nodiscard]] inline TrajectoryLog read_trajectory_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("trajectory csv: empty input");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.empty() || header[0] != "t") throw std::invalid_argument("trajectory csv: first column must be t");
    Index n = 0;
    std::vector<std::pair<std::size_t, Index>> ucols;  // (player, channel)
    for (std::size_t c = 1; c < header.size(); ++c) {
        const auto& h = header[c];
        if (h.size() > 1 && h[0] == 'x') {
            ++n;
        } else if (h.size() > 1 && h[0] == 'u') {
            const auto us = h.find('_');
            if (us == std::string::npos) throw std::invalid_argument("trajectory csv: bad column " + h);
            ucols.emplace_back(std::stoul(h.substr(1, us - 1)) - 1, std::stol(h.substr(us + 1)) - 1);
        } else {
            throw std::invalid_argument("trajectory csv: unknown column " + h);
        }
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<double> r;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
        if (r.size() != header.size()) throw std::invalid_argument("trajectory csv: ragged row");
        rows.push_back(std::move(r));
    }
    TrajectoryLog log;
    const Index L = static_cast<Index>(rows.size());
    log.states.resize(n, L);
    std::vector<Index> counts;
    for (const auto& [p, c] : ucols) {
        if (log.player_ids.empty() || log.player_ids.back() != p) {
            log.player_ids.push_back(p);
            counts.push_back(0);
        }
        ++counts.back();
    }
    for (auto m : counts) log.inputs.emplace_back(m, L);
    for (Index k = 0; k < L; ++k) {
        const auto& r = rows[static_cast<std::size_t>(k)];
        log.times.push_back(r[0]);
        for (Index i = 0; i < n; ++i) log.states(i, k) = r[static_cast<std::size_t>(1 + i)];
        std::size_t col = static_cast<std::size_t>(1 + n);
        for (auto& u : log.inputs)
            for (Index c = 0; c < u.rows(); ++c) u(c, k) = r[col++];
    }
    log.dt_fine = L > 1 ? (log.times.back() - log.times.front()) / static_cast<double>(L - 1) : 0.0;
    return log;
}

}  // namespace invgame
