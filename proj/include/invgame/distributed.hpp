#pragma once

// Star-network procedure: a coordinator sequences data-collection phases, and
// each agent recovers its own B_i, X_i and Q_i from its own (x, u_i) record.
//
// Agent-private data lives in a PrivateStore; every access is recorded with
// the reading agent and the owning agent so cross-agent reads can be audited.

#include "invgame/inverse_mf.hpp"

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace invgame {

struct AgentPrivate {
    Matrix C;
    Matrix K_target;
    Matrix R;  ///< R_ii
    double gamma = 1.0;
    NoiseSpec noise;
};

struct AuditEntry {
    std::size_t reader;
    std::size_t owner;
    std::string item;
    long count;
};

class InformationAudit {
public:
    void record(std::size_t reader, std::size_t owner, const std::string& item) {
        ++counts_[std::make_tuple(reader, owner, item)];
    }

    [[nodiscard]] long cross_reads() const {
        long n = 0;
        for (const auto& [key, c] : counts_)
            if (std::get<0>(key) != std::get<1>(key)) n += c;
        return n;
    }

    [[nodiscard]] std::vector<AuditEntry> entries() const {
        std::vector<AuditEntry> out;
        for (const auto& [key, c] : counts_) out.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), c});
        return out;
    }

private:
    std::map<std::tuple<std::size_t, std::size_t, std::string>, long> counts_;
};

class PrivateStore {
public:
    explicit PrivateStore(std::vector<AgentPrivate> data) : data_(std::move(data)) {}

    [[nodiscard]] const Matrix& C(std::size_t reader, std::size_t owner) const { return get(reader, owner, "C").C; }
    [[nodiscard]] const Matrix& K_target(std::size_t reader, std::size_t owner) const {
        return get(reader, owner, "K").K_target;
    }
    [[nodiscard]] const Matrix& R(std::size_t reader, std::size_t owner) const { return get(reader, owner, "R").R; }
    [[nodiscard]] double gamma(std::size_t reader, std::size_t owner) const { return get(reader, owner, "gamma").gamma; }
    [[nodiscard]] const NoiseSpec& noise(std::size_t reader, std::size_t owner) const {
        return get(reader, owner, "noise").noise;
    }

    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] const InformationAudit& audit() const { return audit_; }

private:
    const AgentPrivate& get(std::size_t reader, std::size_t owner, const char* item) const {
        audit_.record(reader, owner, item);
        return data_.at(owner);
    }

    std::vector<AgentPrivate> data_;
    mutable InformationAudit audit_;
};

struct AgentState {
    std::size_t index = 0;
    Matrix C, K_target, R;
    double gamma = 1.0;
    ExplorationNoise noise;
    Matrix B_est;
    Matrix P;
    Matrix X;
    Matrix K;
    Matrix Q;
    std::vector<double> error_history;  ///< ||e_i|| before each update
    std::vector<Matrix> K_history;      ///< output gain after each update
    int iterations = 0;
    std::optional<TrajectoryLog> log;
    std::optional<DataMatrices> data;

    /// Loads the agent's own private data; the only store access an agent makes.
    static AgentState load(const PrivateStore& store, std::size_t i) {
        AgentState a;
        a.index = i;
        a.C = store.C(i, i);
        a.K_target = store.K_target(i, i);
        a.R = store.R(i, i);
        a.gamma = store.gamma(i, i);
        a.noise = ExplorationNoise(store.noise(i, i), a.K_target.rows());
        return a;
    }

    [[nodiscard]] Matrix F_target() const { return K_target * C; }
};

struct Phase {
    int index = 0;
    std::optional<std::size_t> noisy_agent;
    long step_begin = 0;
    long step_end = 0;  ///< inclusive grid index
};

struct CoordinatorSchedule {
    std::vector<Phase> phases;
    double dt_fine = 0.0;
};

/// Phase 0: every agent applies its noise-free target law. Phase i: agent i
/// alone adds its exploration noise and records (x, u_i).
[[nodiscard]] inline CoordinatorSchedule make_schedule(std::size_t N, double dt_fine, double quiet_duration,
                                                       double phase_duration) {
    if (!(dt_fine > 0.0) || quiet_duration < 0.0 || !(phase_duration > 0.0))
        throw std::invalid_argument("schedule: durations must be positive");
    CoordinatorSchedule s;
    s.dt_fine = dt_fine;
    const long quiet = std::lround(quiet_duration / dt_fine);
    const long len = std::lround(phase_duration / dt_fine);
    s.phases.push_back({0, std::nullopt, 0, quiet});
    long start = quiet;
    for (std::size_t i = 0; i < N; ++i) {
        s.phases.push_back({static_cast<int>(i + 1), i, start, start + len});
        start += len;
    }
    return s;
}

struct Message {
    int phase;
    std::size_t agent;  ///< 0-based
    std::string action;
    double t_start;
    double t_end;
};

[[nodiscard]] inline std::vector<Message> schedule_messages(const CoordinatorSchedule& s, std::size_t N) {
    std::vector<Message> out;
    for (const auto& p : s.phases) {
        const double t0 = static_cast<double>(p.step_begin) * s.dt_fine;
        const double t1 = static_cast<double>(p.step_end) * s.dt_fine;
        for (std::size_t a = 0; a < N; ++a) {
            const bool noisy = p.noisy_agent && *p.noisy_agent == a;
            out.push_back({p.index, a, noisy ? "apply_noisy_and_record" : "apply_target", t0, t1});
        }
    }
    return out;
}

/// Simulates the schedule as one continuous trajectory of the hidden plant
/// (A, B_j), phase by phase; each agent gets only its own phase and its own input.
inline void run_schedule(const Matrix& A, const std::vector<Matrix>& B, std::vector<AgentState>& agents,
                         const CoordinatorSchedule& schedule, const Vector& x0) {
    const std::size_t N = agents.size();
    require_dims(B.size() == N, "run_schedule: one B per agent");
    LinearGameSystem plant{A, {}};
    for (const auto& b : B) plant.players.push_back({b, Matrix::Identity(1, A.rows())});

    std::vector<Matrix> F;
    for (const auto& a : agents) F.push_back(a.F_target());
    const double dt = schedule.dt_fine;
    Vector x = x0;
    for (const auto& p : schedule.phases) {
        InputPolicy policy = [&](double t, const Vector& state) {
            std::vector<Vector> u(N);
            for (std::size_t i = 0; i < N; ++i) {
                u[i] = -F[i] * state;
                if (p.noisy_agent && *p.noisy_agent == i) u[i] += agents[i].noise(t);
            }
            return u;
        };
        std::vector<std::size_t> record;
        if (p.noisy_agent) record.push_back(*p.noisy_agent);
        const long len = p.step_end - p.step_begin;
        auto log = simulate_policy(plant, policy, x, static_cast<double>(p.step_begin) * dt, dt, len, record);
        x = log.states.col(log.length() - 1);
        if (p.noisy_agent) agents.at(*p.noisy_agent).log = std::move(log);
    }
}

struct AgentSeedOptions {
    bool add_identity = true;
    SeedSign sign = SeedSign::Plus;
};

/// Joint estimate of P_i and B_i^T P_i from the agent's own data only.
inline void agent_estimate(AgentState& agent, double delta_t, const AgentSeedOptions& opt = {}) {
    if (!agent.log) throw std::logic_error("agent has no trajectory");
    agent.data = assemble_data(*agent.log, delta_t);
    const Matrix F = agent.F_target();
    const Matrix gain_term = F.transpose() * agent.R * F;
    const Matrix w = seed_weight(agent.C, opt.add_identity);
    const Matrix weight = opt.sign == SeedSign::Plus ? Matrix(w + gain_term) : Matrix(w - gain_term);
    const auto est = mf_seed_solve(*agent.data, {F}, weight);
    agent.P = est.P;
    agent.B_est = estimate_B(est).at(0);
}

/// X <- X - gamma (e^T R^{-1} B^T + B R^{-1} e), e = R^{-1} B^T X - F_d, from X = 0.
inline void agent_gradient_solve(AgentState& agent, int max_iter = 30, double tol = 1e-3) {
    const Index n = agent.C.cols();
    const Matrix Fd = agent.F_target();
    const auto rl = agent.R.ldlt();
    agent.X = Matrix::Zero(n, n);
    agent.error_history.clear();
    agent.K_history.clear();
    agent.iterations = 0;
    for (int s = 0; s < max_iter; ++s) {
        const Matrix e = rl.solve(agent.B_est.transpose() * agent.X) - Fd;
        agent.error_history.push_back(e.norm());
        if (e.norm() <= tol) break;
        const Matrix g = e.transpose() * rl.solve(agent.B_est.transpose());
        agent.X -= agent.gamma * (g + g.transpose());
        agent.iterations = s + 1;
        agent.K_history.push_back(output_gain(agent.B_est, agent.C, agent.R, agent.X));
    }
    agent.K = output_gain(agent.B_est, agent.C, agent.R, agent.X);
}

/// Q_i from the agent's own data with R_ij = 0 for j != i.
inline void agent_update_Q(AgentState& agent, QEstimation mode = QEstimation::Joint) {
    if (!agent.data) throw std::logic_error("agent has no data matrices");
    agent.Q = mf_update_cost_Q(*agent.data, agent.X, {agent.F_target()}, {agent.R}, {agent.B_est}, mode);
}

struct DistributedConfig {
    double dt_fine = 1e-5;
    double delta_t = 0.01;
    Index intervals = 0;          ///< per noisy phase; 0 = 1.5x the minimum
    double quiet_duration = 0.05;
    int max_iter = 30;
    double tol = 1e-3;
    AgentSeedOptions seed{};
    QEstimation q_estimation = QEstimation::Joint;
    Tolerances tolerances{};
};

struct DistributedResult {
    std::vector<AgentState> agents;
    CoordinatorSchedule schedule;
    std::vector<Message> messages;
    std::vector<AuditEntry> audit;
    long cross_reads = 0;
    CostParameters costs;
    ValueProfile values;
    FeedbackProfile feedback;
    std::optional<NashCertificate> certificate;
};

/// Full protocol. The true system is only used to drive the simulated plant
/// and, when `certify` is set, to check the assembled result.
[[nodiscard]] inline DistributedResult run_distributed(const LinearGameSystem& truth, const PrivateStore& store,
                                                       const Vector& x0, const DistributedConfig& cfg,
                                                       bool certify = true) {
    const std::size_t N = store.size();
    require_dims(truth.num_players() == N, "distributed: one agent per player");
    DistributedResult out;
    for (std::size_t i = 0; i < N; ++i) out.agents.push_back(AgentState::load(store, i));

    const Index n = truth.n();
    Index intervals = cfg.intervals;
    for (std::size_t i = 0; i < N; ++i) {
        const Index need = minimum_intervals(n, {out.agents[i].K_target.rows()});
        if (cfg.intervals == 0) intervals = std::max(intervals, (3 * need + 1) / 2);
        else if (cfg.intervals < need)
            throw std::invalid_argument("distributed: intervals per phase below the minimum " + std::to_string(need));
    }
    out.schedule = make_schedule(N, cfg.dt_fine, cfg.quiet_duration, static_cast<double>(intervals) * cfg.delta_t);
    out.messages = schedule_messages(out.schedule, N);
    run_schedule(truth.A, channel_B(truth), out.agents, out.schedule, x0);

    for (auto& a : out.agents) {
        agent_estimate(a, cfg.delta_t, cfg.seed);
        agent_gradient_solve(a, cfg.max_iter, cfg.tol);
        agent_update_Q(a, cfg.q_estimation);
    }

    out.costs.R.assign(N, std::vector<Matrix>(N));
    for (std::size_t i = 0; i < N; ++i) {
        const auto& a = out.agents[i];
        out.costs.Q.push_back(a.Q);
        out.values.X.push_back(a.X);
        out.feedback.K.push_back(a.K);
        for (std::size_t j = 0; j < N; ++j)
            out.costs.R[i][j] = i == j ? a.R : Matrix::Zero(truth.m(j), truth.m(j));
    }
    if (certify) out.certificate = verify_nash(truth, out.costs, out.values, out.feedback, cfg.tolerances);
    out.audit = store.audit().entries();
    out.cross_reads = store.audit().cross_reads();
    return out;
}

}  // namespace invgame
