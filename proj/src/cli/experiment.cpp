#include "cli/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace invgame::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config text
// ---------------------------------------------------------------------------

namespace {

json scalar_to_json(const YAML::Node& node) {
    const std::string& s = node.Scalar();
    if (node.Tag() == "!") return s;  // quoted: always a string
    if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
    if (s == "true" || s == "True" || s == "TRUE") return true;
    if (s == "false" || s == "False" || s == "FALSE") return false;
    const char* begin = s.c_str();
    char* end = nullptr;
    errno = 0;
    if (s.find_first_of("0123456789") != std::string::npos) {
        const long long iv = std::strtoll(begin, &end, 10);
        if (errno == 0 && end == begin + s.size()) return iv;
        errno = 0;
        const double dv = std::strtod(begin, &end);
        if (errno == 0 && end == begin + s.size()) return dv;
    }
    return s;
}

json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar:
            return scalar_to_json(node);
        case YAML::NodeType::Sequence: {
            json arr = json::array();
            for (const auto& item : node) arr.push_back(yaml_to_json(item));
            return arr;
        }
        case YAML::NodeType::Map: {
            json obj = json::object();
            for (const auto& kv : node) {
                const auto key = kv.first.as<std::string>();
                if (obj.contains(key)) throw ConfigError("duplicate key '" + key + "'");
                obj[key] = yaml_to_json(kv.second);
            }
            return obj;
        }
    }
    return nullptr;
}

}  // namespace

json parse_config_text(const std::string& text) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        // nlohmann keeps the last duplicate silently; track keys per open object
        std::vector<std::set<std::string>> open;
        std::string dup;
        const json::parser_callback_t cb = [&](int, json::parse_event_t ev, json& parsed) {
            if (ev == json::parse_event_t::object_start) open.emplace_back();
            else if (ev == json::parse_event_t::object_end) open.pop_back();
            else if (ev == json::parse_event_t::key && !open.back().insert(parsed.get<std::string>()).second &&
                     dup.empty())
                dup = parsed.get<std::string>();
            return true;
        };
        try {
            json j = json::parse(text, cb);
            if (!dup.empty()) throw ConfigError("duplicate key '" + dup + "'");
            return j;
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("invalid JSON: ") + e.what());
        }
    }
    try {
        const json j = yaml_to_json(YAML::Load(text));
        if (!j.is_object()) throw ConfigError("config must be a mapping at top level");
        return j;
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("invalid YAML: ") + e.what());
    }
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

namespace {

using KeySet = std::set<std::string>;

void only_keys(const json& j, const std::string& where, const KeySet& allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a mapping");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

}  // namespace

void check_schema(const json& cfg) {
    only_keys(cfg, "", {"mode", "system", "targets", "R", "solver", "tolerances", "trajectory", "distributed",
                        "verify", "family", "output"});
    if (cfg.contains("system")) {
        only_keys(cfg["system"], "system", {"A", "players"});
        if (cfg["system"].contains("players")) {
            if (!cfg["system"]["players"].is_array()) throw ConfigError("system.players must be a list");
            for (const auto& p : cfg["system"]["players"]) only_keys(p, "system.players[]", {"B", "C"});
        }
    }
    if (cfg.contains("solver")) {
        only_keys(cfg["solver"], "solver",
                  {"alpha", "beta", "delta", "correction_tol", "max_outer", "max_inner", "gradient",
                   "estimate_initial_Q", "q_each_iteration", "certify_each_iteration", "q_estimation", "newton"});
        if (cfg["solver"].contains("newton"))
            only_keys(cfg["solver"]["newton"], "solver.newton",
                      {"coupling", "seed_sign", "seed_identity", "eps", "max_outer", "max_halvings"});
    }
    if (cfg.contains("tolerances"))
        only_keys(cfg["tolerances"], "tolerances", {"are", "exist", "sym", "hurwitz_margin"});
    if (cfg.contains("trajectory")) {
        only_keys(cfg["trajectory"], "trajectory",
                  {"x0", "dt_fine", "delta_t", "T", "intervals", "seed", "noise", "data_csv"});
        if (cfg["trajectory"].contains("noise"))
            only_keys(cfg["trajectory"]["noise"], "trajectory.noise", {"amplitude", "num_terms", "freq_range"});
    }
    if (cfg.contains("distributed"))
        only_keys(cfg["distributed"], "distributed", {"gamma", "max_iter", "tol", "quiet_duration", "intervals"});
    if (cfg.contains("verify")) only_keys(cfg["verify"], "verify", {"result", "Q", "X", "K"});
    if (cfg.contains("family")) only_keys(cfg["family"], "family", {"result", "draws", "scale", "seed", "deltaR"});
    if (cfg.contains("output")) only_keys(cfg["output"], "output", {"dir", "trajectory"});
}

// ---------------------------------------------------------------------------
// Values
// ---------------------------------------------------------------------------

namespace {

double to_double(const json& j, const std::string& what) {
    if (!j.is_number()) throw ConfigError(what + " must be a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw ConfigError(what + " must be finite");
    return v;
}

double get_double(const json& obj, const char* key, double fallback, const std::string& where) {
    return obj.contains(key) ? to_double(obj[key], where + "." + key) : fallback;
}

long get_int(const json& obj, const char* key, long fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_integer()) throw ConfigError(where + "." + key + " must be an integer");
    return obj[key].get<long>();
}

bool get_bool(const json& obj, const char* key, bool fallback, const std::string& where) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_boolean()) throw ConfigError(where + "." + key + " must be true or false");
    return obj[key].get<bool>();
}

std::string get_choice(const json& obj, const char* key, const std::string& fallback, const std::string& where,
                       const KeySet& choices) {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_string() || !choices.count(obj[key].get<std::string>())) {
        std::string list;
        for (const auto& c : choices) list += (list.empty() ? "" : ", ") + c;
        throw ConfigError(where + "." + key + " must be one of: " + list);
    }
    return obj[key].get<std::string>();
}

/// Scalar or list of scalars, one per player.
std::vector<double> get_per_player(const json& obj, const char* key, std::vector<double> fallback,
                                   const std::string& where) {
    if (!obj.contains(key)) return fallback;
    const auto& j = obj[key];
    const std::string what = where + "." + key;
    if (j.is_number()) return {to_double(j, what)};
    if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a number or a non-empty list");
    std::vector<double> out;
    for (const auto& v : j) out.push_back(to_double(v, what));
    return out;
}

}  // namespace

Matrix to_matrix(const json& j, const std::string& what) {
    if (j.is_number()) return Matrix::Constant(1, 1, to_double(j, what));
    if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a number or a non-empty nested list");
    if (!j[0].is_array()) {
        Matrix m(1, static_cast<Index>(j.size()));
        for (std::size_t c = 0; c < j.size(); ++c) m(0, static_cast<Index>(c)) = to_double(j[c], what);
        return m;
    }
    const std::size_t cols = j[0].size();
    Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols || cols == 0)
            throw ConfigError(what + " rows must be lists of equal, non-zero length");
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<Index>(r), static_cast<Index>(c)) = to_double(j[r][c], what);
    }
    return m;
}

json from_matrix(const Matrix& m) {
    json rows = json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

json from_matrices(const std::vector<Matrix>& ms) {
    json out = json::array();
    for (const auto& m : ms) out.push_back(from_matrix(m));
    return out;
}

json from_table(const std::vector<std::vector<Matrix>>& t) {
    json out = json::array();
    for (const auto& row : t) out.push_back(from_matrices(row));
    return out;
}

Vector to_vector(const json& j, Index n, const std::string& what) {
    const Matrix m = to_matrix(j, what);
    if (m.size() != n || (m.rows() != 1 && m.cols() != 1))
        throw ConfigError(what + " must have " + std::to_string(n) + " entries");
    return Eigen::Map<const Vector>(m.data(), n);
}

const json& require(const json& obj, const char* key, const std::string& where) {
    if (!obj.contains(key)) throw ConfigError("missing " + (where.empty() ? std::string(key) : where + "." + key));
    return obj[key];
}

}  // namespace

LinearGameSystem parse_system(const json& j) {
    LinearGameSystem sys;
    sys.A = to_matrix(require(j, "A", "system"), "system.A");
    const auto& players = require(j, "players", "system");
    if (!players.is_array() || players.empty()) throw ConfigError("system.players must be a non-empty list");
    for (std::size_t i = 0; i < players.size(); ++i) {
        const std::string where = "system.players[" + std::to_string(i + 1) + "]";
        PlayerChannel ch;
        ch.B = to_matrix(require(players[i], "B", where), where + ".B");
        ch.C = to_matrix(require(players[i], "C", where), where + ".C");
        // a flat list for B is a column
        if (ch.B.rows() == 1 && ch.B.cols() == sys.A.rows() && sys.A.rows() > 1) ch.B.transposeInPlace();
        sys.players.push_back(std::move(ch));
    }
    return sys;
}

std::vector<std::vector<Matrix>> parse_R(const json& j, const LinearGameSystem& sys) {
    const std::size_t N = sys.num_players();
    if (!j.is_array() || j.size() != N) throw ConfigError("R must be an " + std::to_string(N) + "x" +
                                                          std::to_string(N) + " table");
    std::vector<std::vector<Matrix>> R(N);
    for (std::size_t i = 0; i < N; ++i) {
        if (!j[i].is_array() || j[i].size() != N)
            throw ConfigError("R row " + std::to_string(i + 1) + " must have " + std::to_string(N) + " entries");
        for (std::size_t jj = 0; jj < N; ++jj) {
            const std::string what = pair_name("R", i, jj);
            Matrix r = to_matrix(j[i][jj], what);
            const Index m = sys.m(jj);
            if (r.size() == 1 && m > 1) r = r(0, 0) * Matrix::Identity(m, m);  // scalar c means c I
            R[i].push_back(std::move(r));
        }
    }
    return R;
}

FeedbackProfile parse_targets(const json& j, const LinearGameSystem& sys) {
    if (!j.is_array() || j.size() != sys.num_players())
        throw ConfigError("targets must list one gain per player (" + std::to_string(sys.num_players()) + ")");
    FeedbackProfile fb;
    for (std::size_t i = 0; i < j.size(); ++i) fb.K.push_back(to_matrix(j[i], player_name("K", i)));
    require_profile(sys, fb);
    return fb;
}

json certificate_json(const NashCertificate& c) {
    return json{{"passed", c.passed},
                {"residual_norms", c.residual_norms},
                {"existence_defects", c.existence_defects},
                {"gain_defects", c.gain_defects},
                {"spectral_abscissa", c.spectral_abscissa},
                {"failures", c.failures}};
}

std::optional<std::uint64_t> parse_seed(const std::string& text) {
    if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    errno = 0;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
    if (errno != 0 || *end != '\0') return std::nullopt;
    return static_cast<std::uint64_t>(v);
}

// ---------------------------------------------------------------------------
// Experiment plumbing
// ---------------------------------------------------------------------------

namespace {

struct Context {
    json cfg;
    fs::path config_dir;
    fs::path out_dir;
    std::string mode;
    std::optional<std::uint64_t> flag_seed, env_seed;
    std::ostream* log = nullptr;

    [[nodiscard]] const json& section(const char* key) const {
        static const json empty = json::object();
        return cfg.contains(key) ? cfg[key] : empty;
    }

    [[nodiscard]] fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_absolute() ? path : config_dir / path;
    }

    /// --seed, then INVGAME_SEED, then the config value.
    [[nodiscard]] std::uint64_t seed(const json& obj, std::uint64_t fallback = 1) const {
        if (flag_seed) return *flag_seed;
        if (env_seed) return *env_seed;
        if (obj.contains("seed")) {
            if (!obj["seed"].is_number_unsigned() && !(obj["seed"].is_number_integer() && obj["seed"].get<long>() >= 0))
                throw ConfigError("seed must be a non-negative integer");
            return obj["seed"].get<std::uint64_t>();
        }
        return fallback;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string csv_number(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

/// trace.csv: s, err_1..err_N, spectral_abscissa; one row per outer iteration s >= 1.
void write_trace(const fs::path& path, std::size_t N, const std::vector<int>& s,
                 const std::vector<std::vector<double>>& errs, const std::vector<double>& abscissa) {
    std::ostringstream os;
    os << "s";
    for (std::size_t i = 0; i < N; ++i) os << ",err_" << i + 1;
    os << ",spectral_abscissa\n";
    for (std::size_t r = 0; r < s.size(); ++r) {
        os << s[r];
        for (double e : errs[r]) os << ',' << csv_number(e);
        os << ',' << csv_number(abscissa[r]) << '\n';
    }
    write_text(path, os.str());
}

void write_inverse_trace(const fs::path& path, std::size_t N, const InverseTrace& trace) {
    std::vector<int> s;
    std::vector<std::vector<double>> errs;
    std::vector<double> ab;
    for (const auto& rec : trace) {
        if (rec.s == 0) continue;
        s.push_back(rec.s);
        errs.push_back(rec.error_norms);
        ab.push_back(rec.spectral_abscissa);
    }
    write_trace(path, N, s, errs, ab);
}

json system_json(const LinearGameSystem& sys) {
    json players = json::array();
    for (const auto& p : sys.players) players.push_back({{"B", from_matrix(p.B)}, {"C", from_matrix(p.C)}});
    return {{"A", from_matrix(sys.A)}, {"players", players}};
}

json costs_json(const CostParameters& c) { return {{"Q", from_matrices(c.Q)}, {"R", from_table(c.R)}}; }

json trace_json(const InverseTrace& trace) {
    json out = json::array();
    for (const auto& rec : trace) {
        json r{{"s", rec.s}, {"error_norms", rec.error_norms}, {"spectral_abscissa", rec.spectral_abscissa},
               {"correction_iterations", rec.correction_iterations}};
        if (!rec.Q.empty()) r["Q"] = from_matrices(rec.Q);
        if (rec.certificate) r["certificate"] = certificate_json(*rec.certificate);
        out.push_back(std::move(r));
    }
    return out;
}

Tolerances parse_tolerances(const Context& ctx) {
    const auto& t = ctx.section("tolerances");
    Tolerances tol;
    tol.tol_are = get_double(t, "are", tol.tol_are, "tolerances");
    tol.tol_exist = get_double(t, "exist", tol.tol_exist, "tolerances");
    tol.sym_tol = get_double(t, "sym", tol.sym_tol, "tolerances");
    tol.hurwitz_margin = get_double(t, "hurwitz_margin", tol.hurwitz_margin, "tolerances");
    if (!(tol.tol_are > 0.0 && tol.tol_exist > 0.0 && tol.sym_tol >= 0.0 && tol.hurwitz_margin >= 0.0))
        throw ConfigError("tolerances must be positive");
    return tol;
}

SolverConfig parse_solver(const Context& ctx, SolverConfig cfg, std::size_t N) {
    const auto& s = ctx.section("solver");
    const std::string w = "solver";
    cfg.alpha = get_per_player(s, "alpha", cfg.alpha, w);
    cfg.beta = get_per_player(s, "beta", cfg.beta, w);
    cfg.delta = get_per_player(s, "delta", cfg.delta, w);
    for (const auto* v : {&cfg.alpha, &cfg.beta, &cfg.delta}) {
        if (v->size() != 1 && v->size() != N)
            throw ConfigError("solver step sizes and thresholds need 1 or " + std::to_string(N) + " values");
        for (double x : *v)
            if (!(x > 0.0)) throw ConfigError("solver alpha, beta and delta must be positive");
    }
    cfg.correction_tol = get_double(s, "correction_tol", cfg.correction_tol, w);
    cfg.max_outer = static_cast<int>(get_int(s, "max_outer", cfg.max_outer, w));
    cfg.max_inner = static_cast<int>(get_int(s, "max_inner", cfg.max_inner, w));
    if (cfg.max_outer < 0 || cfg.max_inner < 1) throw ConfigError("solver iteration caps must be positive");
    cfg.gradient = get_choice(s, "gradient", "symmetric", w, {"symmetric", "printed"}) == "printed"
                       ? GradientForm::Printed
                       : GradientForm::Symmetric;
    cfg.estimate_initial_Q = get_bool(s, "estimate_initial_Q", cfg.estimate_initial_Q, w);
    cfg.q_each_iteration = get_bool(s, "q_each_iteration", cfg.q_each_iteration, w);
    cfg.certify_each_iteration = get_bool(s, "certify_each_iteration", cfg.certify_each_iteration, w);

    const json empty = json::object();
    const auto& nw = s.contains("newton") ? s["newton"] : empty;
    const std::string wn = "solver.newton";
    auto& st = cfg.stabilize;
    st.coupling = get_choice(nw, "coupling", st.coupling == NewtonCoupling::OutputFeedback ? "output" : "state", wn,
                             {"state", "output"}) == "output"
                      ? NewtonCoupling::OutputFeedback
                      : NewtonCoupling::StateFeedback;
    st.seed_sign = get_choice(nw, "seed_sign", "plus", wn, {"plus", "minus"}) == "minus" ? SeedSign::MinusPrinted
                                                                                          : SeedSign::Plus;
    st.seed_add_identity = get_bool(nw, "seed_identity", st.seed_add_identity, wn);
    st.eps = get_double(nw, "eps", st.eps, wn);
    st.max_outer = static_cast<int>(get_int(nw, "max_outer", st.max_outer, wn));
    st.max_halvings = static_cast<int>(get_int(nw, "max_halvings", st.max_halvings, wn));
    if (!(st.eps > 0.0) || st.max_outer < 1 || st.max_halvings < 0)
        throw ConfigError("solver.newton eps and caps must be positive");

    cfg.tolerances = parse_tolerances(ctx);
    st.hurwitz_margin = cfg.tolerances.hurwitz_margin;
    return cfg;
}

QEstimation parse_q_estimation(const Context& ctx) {
    return get_choice(ctx.section("solver"), "q_estimation", "joint", "solver", {"joint", "substitute_b"}) ==
                   "substitute_b"
               ? QEstimation::SubstituteB
               : QEstimation::Joint;
}

struct TrajectorySpec {
    Vector x0;
    double dt_fine = 1e-5;
    double delta_t = 0.01;
    std::optional<double> T;
    Index intervals = 0;
    NoiseSpec noise;
    std::uint64_t seed = 1;
    std::optional<fs::path> data_csv;
};

TrajectorySpec parse_trajectory(const Context& ctx, Index n) {
    const auto& t = ctx.section("trajectory");
    const std::string w = "trajectory";
    TrajectorySpec spec;
    spec.x0 = t.contains("x0") ? to_vector(t["x0"], n, "trajectory.x0") : Vector(Vector::Ones(n));
    spec.dt_fine = get_double(t, "dt_fine", spec.dt_fine, w);
    spec.delta_t = get_double(t, "delta_t", spec.delta_t, w);
    if (t.contains("T")) spec.T = to_double(t["T"], "trajectory.T");
    spec.intervals = get_int(t, "intervals", 0, w);
    spec.seed = ctx.seed(t);
    if (t.contains("data_csv")) {
        if (!t["data_csv"].is_string()) throw ConfigError("trajectory.data_csv must be a path");
        spec.data_csv = ctx.resolve(t["data_csv"].get<std::string>());
    }
    const json empty = json::object();
    const auto& nz = t.contains("noise") ? t["noise"] : empty;
    spec.noise.amplitude = get_double(nz, "amplitude", spec.noise.amplitude, "trajectory.noise");
    spec.noise.num_terms = static_cast<int>(get_int(nz, "num_terms", spec.noise.num_terms, "trajectory.noise"));
    if (nz.contains("freq_range")) {
        const Matrix fr = to_matrix(nz["freq_range"], "trajectory.noise.freq_range");
        if (fr.size() != 2) throw ConfigError("trajectory.noise.freq_range must be [low, high]");
        spec.noise.freq_low = fr(0);
        spec.noise.freq_high = fr(fr.size() - 1);
    }
    try {
        validate_noise(spec.noise);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("trajectory.noise: ") + e.what());
    }

    if (!(spec.dt_fine > 0.0) || !(spec.delta_t > 0.0)) throw ConfigError("trajectory dt_fine and delta_t must be positive");
    const double ratio = spec.delta_t / spec.dt_fine;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio)
        throw ConfigError("trajectory.delta_t must be an integer multiple of dt_fine");
    // Resolve the fastest noise component with at least 20 RK4 steps per period.
    const double w_max = std::max(std::abs(spec.noise.freq_low), std::abs(spec.noise.freq_high));
    if (spec.noise.amplitude > 0.0 && spec.noise.num_terms > 0 && spec.dt_fine * w_max > 0.05 + 1e-12) {
        std::ostringstream os;
        os << "trajectory.dt_fine=" << spec.dt_fine << " too coarse for noise up to " << w_max
           << " rad/s (need dt_fine <= " << 0.05 / w_max << ")";
        throw ConfigError(os.str());
    }
    if (spec.intervals < 0) throw ConfigError("trajectory.intervals must be >= 0");
    if (spec.T && !(*spec.T > 0.0)) throw ConfigError("trajectory.T must be positive");
    return spec;
}

/// Number of data intervals: explicit count, else T / delta_t, else 1.5x the minimum.
Index resolve_intervals(const TrajectorySpec& spec, Index needed) {
    Index k = spec.intervals;
    if (k == 0 && spec.T) k = static_cast<Index>(std::floor(*spec.T / spec.delta_t + 1e-9));
    if (k == 0) k = (3 * needed + 1) / 2;
    if (k < needed)
        throw ConfigError("trajectory gives " + std::to_string(k) + " intervals; at least " + std::to_string(needed) +
                          " are needed");
    return k;
}

std::vector<ExplorationNoise> player_noise(const LinearGameSystem& sys, const TrajectorySpec& spec) {
    std::vector<ExplorationNoise> out;
    for (std::size_t i = 0; i < sys.num_players(); ++i) {
        NoiseSpec ns = spec.noise;
        ns.seed = spec.seed + i;
        out.emplace_back(ns, sys.m(i));
    }
    return out;
}

void check_game(const LinearGameSystem& sys, const CostParameters& costs, bool require_coupling, double sym_tol) {
    ValidationOptions vo;
    vo.require_output_coupling = require_coupling;
    vo.sym_tol = sym_tol;
    const auto v = validate_game(sys, costs, vo);
    if (!v.empty()) {
        std::string msg = "invalid game:";
        for (const auto& s : v) msg += " " + s + ";";
        throw ConfigError(msg);
    }
}

struct GameInput {
    LinearGameSystem sys;
    CostParameters R;
    FeedbackProfile K;
};

GameInput parse_game(const Context& ctx, bool require_coupling) {
    GameInput g;
    g.sys = parse_system(require(ctx.cfg, "system", ""));
    g.R.R = parse_R(require(ctx.cfg, "R", ""), g.sys);
    check_game(g.sys, g.R, require_coupling, parse_tolerances(ctx).sym_tol);
    for (auto& row : g.R.R)
        for (auto& r : row) r = symmetrize(r);
    g.K = parse_targets(require(ctx.cfg, "targets", ""), g.sys);
    return g;
}

json base_result(const Context& ctx) { return json{{"mode", ctx.mode}}; }

int certificate_exit(const NashCertificate& c, std::ostream& log) {
    if (c.passed) return kOk;
    log << "certificate failed:\n";
    for (const auto& f : c.failures) log << "  " << f << "\n";
    return kCertificateFailed;
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

int run_solve_mb(const Context& ctx) {
    const auto g = parse_game(ctx, true);
    const auto cfg = parse_solver(ctx, SolverConfig{}, g.sys.num_players());
    const auto r = solve_inverse_model_based(g.sys, g.R, g.K, cfg);

    int corrections = 0;
    for (const auto& rec : r.trace)
        for (int c : rec.correction_iterations) corrections += c;
    json out = base_result(ctx);
    out["system"] = system_json(g.sys);
    out["targets"] = from_matrices(g.K.K);
    out["costs"] = costs_json(r.costs);
    out["values"] = {{"X", from_matrices(r.values.X)}};
    out["feedback"] = {{"K", from_matrices(r.feedback.K)}};
    out["stabilization"] = {{"seeds", from_matrices(r.stabilization.seeds.X)},
                            {"X", from_matrices(r.stabilization.values.X)},
                            {"K", from_matrices(r.stabilization.feedback.K)},
                            {"iterations", r.stabilization.iterations}};
    out["corrected_initial"] = from_matrices(r.corrected_initial.X);
    out["certificate"] = certificate_json(r.certificate);
    out["iterations"] = {{"outer", r.outer_iterations},
                         {"newton", r.stabilization.iterations},
                         {"correction_total", corrections}};
    out["initial_error_norms"] = r.trace.front().error_norms;
    out["trace"] = trace_json(r.trace);
    write_json(ctx.out_dir / "result.json", out);
    write_inverse_trace(ctx.out_dir / "trace.csv", g.sys.num_players(), r.trace);
    *ctx.log << "solve-mb: " << r.outer_iterations << " outer iterations\n";
    return certificate_exit(r.certificate, *ctx.log);
}

struct DataSource {
    TrajectoryLog log;
    DataMatrices data;
    bool simulated = false;
};

DataSource collect_data(const GameInput& g, const TrajectorySpec& spec) {
    DataSource src;
    std::vector<Index> ms;
    for (std::size_t i = 0; i < g.sys.num_players(); ++i) ms.push_back(g.sys.m(i));
    const Index needed = minimum_intervals(g.sys.n(), ms);
    if (spec.data_csv) {
        std::ifstream in(*spec.data_csv);
        if (!in) throw ConfigError("cannot read trajectory.data_csv '" + spec.data_csv->string() + "'");
        try {
            src.log = read_trajectory_csv(in);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("trajectory.data_csv: ") + e.what());
        }
    } else {
        const Index k = resolve_intervals(spec, needed);
        src.log = simulate(g.sys, g.K, player_noise(g.sys, spec), spec.x0, spec.dt_fine,
                           static_cast<double>(k) * spec.delta_t);
        src.simulated = true;
    }
    src.data = assemble_data(src.log, spec.delta_t, needed);
    return src;
}

json data_json(const DataSource& src, const TrajectorySpec& spec) {
    return {{"source", src.simulated ? "simulated" : "csv"},
            {"seed", spec.seed},
            {"dt_fine", src.log.dt_fine},
            {"delta_t", src.data.delta_t},
            {"samples", src.log.times.size()},
            {"intervals", src.data.rows()},
            {"excitation_rank", src.data.excitation_rank},
            {"required_rank", src.data.required_rank()}};
}

bool want_trajectory(const Context& ctx) { return get_bool(ctx.section("output"), "trajectory", true, "output"); }

void maybe_write_trajectory(const Context& ctx, const TrajectoryLog& log) {
    if (!want_trajectory(ctx)) return;
    std::ofstream out(ctx.out_dir / "trajectory.csv", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write trajectory.csv");
    write_trajectory_csv(out, log);
}

int run_solve_mf(const Context& ctx) {
    const auto g = parse_game(ctx, true);
    const auto cfg = parse_solver(ctx, default_model_free_config(), g.sys.num_players());
    const auto q_mode = parse_q_estimation(ctx);
    const auto spec = parse_trajectory(ctx, g.sys.n());
    const auto src = collect_data(g, spec);
    maybe_write_trajectory(ctx, src.log);
    if (src.data.excitation_rank < src.data.required_rank())
        *ctx.log << "warning: excitation rank " << src.data.excitation_rank << " below " << src.data.required_rank()
                 << "\n";

    const auto r = solve_inverse_model_free(src.data, channel_C(g.sys), g.K, g.R, cfg, &g.sys, q_mode);

    json out = base_result(ctx);
    out["system"] = system_json(g.sys);
    out["targets"] = from_matrices(g.K.K);
    out["costs"] = costs_json(r.costs);
    out["values"] = {{"X", from_matrices(r.values.X)}};
    out["feedback"] = {{"K", from_matrices(r.feedback.K)}};
    out["estimated_B"] = from_matrices(r.B_est);
    json seeds = json::array();
    for (const auto& s : r.seeds)
        seeds.push_back({{"P", from_matrix(s.P)},
                         {"residual_norm", s.residual_norm},
                         {"rhs_norm", s.rhs_norm},
                         {"condition", s.condition},
                         {"min_singular_value", s.min_singular_value}});
    out["seeds"] = seeds;
    out["newton"] = {{"X", from_matrices(r.newton_values.X)},
                     {"K", from_matrices(r.newton_feedback.K)},
                     {"iterations", r.newton_iterations}};
    out["corrected_initial"] = from_matrices(r.corrected_initial.X);
    out["data"] = data_json(src, spec);
    out["certificate"] = certificate_json(*r.certificate);
    out["iterations"] = {{"outer", r.outer_iterations}, {"newton", r.newton_iterations}};
    out["initial_error_norms"] = r.trace.front().error_norms;
    out["trace"] = trace_json(r.trace);
    write_json(ctx.out_dir / "result.json", out);
    write_inverse_trace(ctx.out_dir / "trace.csv", g.sys.num_players(), r.trace);
    *ctx.log << "solve-mf: " << r.newton_iterations << " Newton sweeps, " << r.outer_iterations
             << " outer iterations\n";
    return certificate_exit(*r.certificate, *ctx.log);
}

int run_solve_dist(const Context& ctx) {
    const auto g = parse_game(ctx, false);
    const std::size_t N = g.sys.num_players();
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
            if (i != j && g.R.R[i][j].norm() != 0.0)
                throw ConfigError("solve-dist uses R_ij = 0 for i != j; " + pair_name("R", i, j) + " is nonzero");
    const auto spec = parse_trajectory(ctx, g.sys.n());
    const auto& d = ctx.section("distributed");
    const std::string w = "distributed";
    const auto gamma = get_per_player(d, "gamma", {1.0}, w);
    if (gamma.size() != 1 && gamma.size() != N) throw ConfigError("distributed.gamma needs 1 or N values");

    DistributedConfig cfg;
    cfg.dt_fine = spec.dt_fine;
    cfg.delta_t = spec.delta_t;
    cfg.intervals = get_int(d, "intervals", spec.intervals, w);
    cfg.quiet_duration = get_double(d, "quiet_duration", cfg.quiet_duration, w);
    cfg.max_iter = static_cast<int>(get_int(d, "max_iter", cfg.max_iter, w));
    cfg.tol = get_double(d, "tol", cfg.tol, w);
    cfg.q_estimation = parse_q_estimation(ctx);
    cfg.tolerances = parse_tolerances(ctx);
    if (cfg.intervals < 0 || cfg.max_iter < 1 || !(cfg.tol > 0.0) || cfg.quiet_duration < 0.0)
        throw ConfigError("distributed settings must be positive");

    std::vector<AgentPrivate> priv;
    for (std::size_t i = 0; i < N; ++i) {
        AgentPrivate a;
        a.C = g.sys.C(i);
        a.K_target = g.K.K[i];
        a.R = g.R.R[i][i];
        a.gamma = per_player(gamma, i, "gamma");
        if (!(a.gamma > 0.0)) throw ConfigError("distributed.gamma must be positive");
        a.noise = spec.noise;
        a.noise.seed = spec.seed + i;
        priv.push_back(std::move(a));
    }
    const PrivateStore store(std::move(priv));
    const auto r = run_distributed(g.sys, store, spec.x0, cfg, true);

    std::ostringstream jl;
    for (const auto& m : r.messages)
        jl << json{{"phase", m.phase}, {"agent", m.agent + 1}, {"action", m.action}, {"t_start", m.t_start},
                   {"t_end", m.t_end}}
                  .dump()
           << "\n";
    write_text(ctx.out_dir / "messages.jsonl", jl.str());

    // Trace: gains after each agent update; agents that stopped early hold their last gain.
    int S = 0;
    for (const auto& a : r.agents) S = std::max(S, a.iterations);
    std::vector<int> srow;
    std::vector<std::vector<double>> errs;
    std::vector<double> ab;
    for (int s = 1; s <= S; ++s) {
        FeedbackProfile fb;
        std::vector<double> e;
        for (const auto& a : r.agents) {
            const Matrix K = a.K_history.empty() ? a.K : a.K_history[std::min(static_cast<std::size_t>(s), a.K_history.size()) - 1];
            fb.K.push_back(K);
            e.push_back(error_norm(K - a.K_target));
        }
        srow.push_back(s);
        errs.push_back(e);
        ab.push_back(spectral_abscissa(closed_loop(g.sys, fb)));
    }
    write_trace(ctx.out_dir / "trace.csv", N, srow, errs, ab);

    json out = base_result(ctx);
    out["system"] = system_json(g.sys);
    out["targets"] = from_matrices(g.K.K);
    out["costs"] = costs_json(r.costs);
    out["values"] = {{"X", from_matrices(r.values.X)}};
    out["feedback"] = {{"K", from_matrices(r.feedback.K)}};
    json agents = json::array();
    std::vector<Matrix> B_est;
    for (const auto& a : r.agents) {
        B_est.push_back(a.B_est);
        agents.push_back({{"agent", a.index + 1},
                          {"B_est", from_matrix(a.B_est)},
                          {"P", from_matrix(a.P)},
                          {"iterations", a.iterations},
                          {"error_history", a.error_history},
                          {"excitation_rank", a.data ? a.data->excitation_rank : 0},
                          {"intervals", a.data ? a.data->rows() : 0}});
    }
    out["estimated_B"] = from_matrices(B_est);
    out["agents"] = agents;
    json audit = json::array();
    for (const auto& e : r.audit)
        audit.push_back({{"reader", e.reader + 1}, {"owner", e.owner + 1}, {"item", e.item}, {"count", e.count}});
    out["audit"] = {{"cross_reads", r.cross_reads}, {"entries", audit}};
    out["seed"] = spec.seed;
    out["certificate"] = certificate_json(*r.certificate);
    out["iterations"] = {{"outer", S}};
    write_json(ctx.out_dir / "result.json", out);
    *ctx.log << "solve-dist: " << S << " iterations, " << r.cross_reads << " cross-agent reads\n";
    if (r.cross_reads != 0) {
        *ctx.log << "information audit failed: " << r.cross_reads << " cross-agent reads\n";
        return kCertificateFailed;
    }
    return certificate_exit(*r.certificate, *ctx.log);
}

json load_result_file(const Context& ctx, const json& obj, const std::string& where) {
    if (!obj["result"].is_string()) throw ConfigError(where + ".result must be a path");
    const auto path = ctx.resolve(obj["result"].get<std::string>());
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + where + ".result '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(where + ".result is not valid JSON: " + e.what());
    }
}

std::vector<Matrix> matrix_list(const json& j, const std::string& what, std::size_t N) {
    if (!j.is_array() || j.size() != N) throw ConfigError(what + " must list " + std::to_string(N) + " matrices");
    std::vector<Matrix> out;
    for (std::size_t i = 0; i < N; ++i) out.push_back(to_matrix(j[i], player_name(what, i)));
    return out;
}

/// Game tuple from a prior result file, with the config's system block taking precedence.
struct Tuple {
    LinearGameSystem sys;
    CostParameters costs;
    ValueProfile values;
    FeedbackProfile fb;
};

Tuple tuple_from_result(const Context& ctx, const json& res) {
    Tuple t;
    t.sys = parse_system(ctx.cfg.contains("system") ? ctx.cfg["system"] : require(res, "system", "result"));
    const std::size_t N = t.sys.num_players();
    const auto& costs = require(res, "costs", "result");
    t.costs.Q = matrix_list(require(costs, "Q", "result.costs"), "Q", N);
    t.costs.R = parse_R(ctx.cfg.contains("R") ? ctx.cfg["R"] : require(costs, "R", "result.costs"), t.sys);
    t.values.X = matrix_list(require(require(res, "values", "result"), "X", "result.values"), "X", N);
    t.fb.K = matrix_list(require(require(res, "feedback", "result"), "K", "result.feedback"), "K", N);
    return t;
}

void check_tuple(const Tuple& t, double sym_tol) {
    check_game(t.sys, t.costs, false, sym_tol);
    require_profile(t.sys, t.fb);
    require_values(t.sys, t.values);
}

int run_verify(const Context& ctx) {
    const auto& v = require(ctx.cfg, "verify", "");
    const auto tol = parse_tolerances(ctx);
    Tuple t;
    if (v.contains("result")) {
        t = tuple_from_result(ctx, load_result_file(ctx, v, "verify"));
    } else {
        t.sys = parse_system(require(ctx.cfg, "system", ""));
        t.costs.R = parse_R(require(ctx.cfg, "R", ""), t.sys);
    }
    const std::size_t N = t.sys.num_players();
    if (v.contains("Q")) t.costs.Q = matrix_list(v["Q"], "Q", N);
    if (v.contains("X")) t.values.X = matrix_list(v["X"], "X", N);
    if (v.contains("K")) t.fb.K = matrix_list(v["K"], "K", N);
    if (t.costs.Q.size() != N || t.values.X.size() != N || t.fb.K.size() != N)
        throw ConfigError("verify needs Q, X and K for every player (inline or via verify.result)");
    check_tuple(t, tol.sym_tol);

    const auto cert = verify_nash(t.sys, t.costs, t.values, t.fb, tol);
    json out = base_result(ctx);
    out["system"] = system_json(t.sys);
    out["costs"] = costs_json(t.costs);
    out["values"] = {{"X", from_matrices(t.values.X)}};
    out["feedback"] = {{"K", from_matrices(t.fb.K)}};
    out["certificate"] = certificate_json(cert);
    write_json(ctx.out_dir / "result.json", out);
    *ctx.log << "verify-ne: certificate " << (cert.passed ? "passed" : "failed") << "\n";
    for (const auto& f : cert.failures) *ctx.log << "  " << f << "\n";
    return kOk;
}

using Table = std::vector<std::vector<Matrix>>;

Table parse_delta_table(const json& j, const LinearGameSystem& sys, std::size_t draw) {
    const std::string where = "family.deltaR[" + std::to_string(draw + 1) + "]";
    Table t;
    try {
        t = parse_R(j, sys);
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    }
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t k = 0; k < t.size(); ++k) {
            const Index m = sys.m(k);
            if (t[i][k].rows() != m || t[i][k].cols() != m)
                throw ConfigError(where + ": delta" + pair_name("R", i, k) + " has wrong shape");
            if (i == k && t[i][k].norm() != 0.0)
                throw ConfigError(where + ": delta" + pair_name("R", i, i) + " must be zero");
            if (asymmetry(t[i][k]) > 0.0) throw ConfigError(where + ": delta" + pair_name("R", i, k) + " not symmetric");
        }
    return t;
}

Table random_delta(const LinearGameSystem& sys, double scale, std::mt19937_64& rng) {
    const std::size_t N = sys.num_players();
    std::uniform_real_distribution<double> dist(-scale, scale);
    Table t(N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < N; ++k) {
            const Index m = sys.m(k);
            Matrix d = Matrix::Zero(m, m);
            if (i != k)
                for (Index r = 0; r < m; ++r)
                    for (Index c = r; c < m; ++c) d(r, c) = d(c, r) = dist(rng);
            t[i].push_back(std::move(d));
        }
    return t;
}

int run_family(const Context& ctx) {
    const auto& f = require(ctx.cfg, "family", "");
    const auto tol = parse_tolerances(ctx);
    if (!f.contains("result")) throw ConfigError("missing family.result");
    const Tuple t = tuple_from_result(ctx, load_result_file(ctx, f, "family"));
    check_tuple(t, tol.sym_tol);

    // All draws are validated before any is evaluated.
    std::vector<Table> draws;
    if (f.contains("deltaR")) {
        if (!f["deltaR"].is_array()) throw ConfigError("family.deltaR must be a list of tables");
        for (std::size_t k = 0; k < f["deltaR"].size(); ++k) draws.push_back(parse_delta_table(f["deltaR"][k], t.sys, k));
    }
    const long k_random = get_int(f, "draws", 0, "family");
    const double scale = get_double(f, "scale", 1.0, "family");
    if (k_random < 0 || !(scale > 0.0)) throw ConfigError("family.draws must be >= 0 and family.scale > 0");
    const std::uint64_t seed = ctx.seed(f);
    std::mt19937_64 rng(seed);
    for (long k = 0; k < k_random; ++k) draws.push_back(random_delta(t.sys, scale, rng));
    if (draws.empty()) throw ConfigError("family needs family.draws > 0 or explicit family.deltaR tables");

    json out = base_result(ctx);
    out["system"] = system_json(t.sys);
    out["base"] = {{"costs", costs_json(t.costs)},
                   {"values", {{"X", from_matrices(t.values.X)}}},
                   {"feedback", {{"K", from_matrices(t.fb.K)}}}};
    out["seed"] = seed;
    json records = json::array();
    std::vector<std::size_t> failed;
    for (std::size_t k = 0; k < draws.size(); ++k) {
        const auto costs = generate_equivalent_costs(t.sys, t.costs, t.fb, draws[k], tol.sym_tol);
        const auto cert = verify_nash(t.sys, costs, t.values, t.fb, tol);
        if (!cert.passed) failed.push_back(k + 1);
        records.push_back({{"draw", k + 1},
                           {"deltaR", from_table(draws[k])},
                           {"costs", costs_json(costs)},
                           {"certificate", certificate_json(cert)}});
    }
    out["draws"] = records;
    out["failed_draws"] = failed;
    write_json(ctx.out_dir / "result.json", out);
    *ctx.log << "family: " << draws.size() << " draws, " << failed.size() << " failed\n";
    if (failed.empty()) return kOk;
    *ctx.log << "certificate failed on draw";
    for (auto k : failed) *ctx.log << " " << k;
    *ctx.log << "\n";
    return kCertificateFailed;
}

int run_simulate(const Context& ctx) {
    GameInput g;
    g.sys = parse_system(require(ctx.cfg, "system", ""));
    {
        ValidationOptions vo;
        vo.require_output_coupling = false;
        const auto v = validate_system(g.sys, vo);
        if (!v.empty()) throw ConfigError("invalid system: " + v.front());
    }
    g.K = parse_targets(require(ctx.cfg, "targets", ""), g.sys);
    const auto spec = parse_trajectory(ctx, g.sys.n());
    if (spec.data_csv) throw ConfigError("simulate does not read trajectory.data_csv");
    const auto src = collect_data(g, spec);
    {
        std::ofstream os(ctx.out_dir / "trajectory.csv", std::ios::binary);
        if (!os) throw std::runtime_error("cannot write trajectory.csv");
        write_trajectory_csv(os, src.log);
    }
    json out = base_result(ctx);
    out["system"] = system_json(g.sys);
    out["targets"] = from_matrices(g.K.K);
    out["data"] = data_json(src, spec);
    out["final_state"] = std::vector<double>(src.log.states.col(src.log.states.cols() - 1).data(),
                                             src.log.states.col(src.log.states.cols() - 1).data() + g.sys.n());
    write_json(ctx.out_dir / "result.json", out);
    *ctx.log << "simulate: " << src.log.times.size() << " samples, excitation rank " << src.data.excitation_rank
             << "/" << src.data.required_rank() << "\n";
    return kOk;
}

}  // namespace

int run(const RunOptions& opt, std::ostream& log) {
    using Runner = int (*)(const Context&);
    static const std::map<std::string, Runner> runners{
        {"solve-mb", run_solve_mb}, {"solve-mf", run_solve_mf}, {"solve-dist", run_solve_dist},
        {"verify-ne", run_verify},  {"family", run_family},     {"simulate", run_simulate}};
    const auto start = std::chrono::steady_clock::now();
    try {
        const auto it = runners.find(opt.mode);
        if (it == runners.end()) throw ConfigError("unknown mode '" + opt.mode + "'");
        Context ctx;
        ctx.cfg = load_config_file(opt.config_path);
        check_schema(ctx.cfg);
        if (ctx.cfg.contains("mode") && ctx.cfg["mode"] != opt.mode)
            throw ConfigError("config is for mode '" + ctx.cfg["mode"].dump() + "', not '" + opt.mode + "'");
        ctx.mode = opt.mode;
        ctx.config_dir = fs::absolute(opt.config_path).parent_path();
        ctx.flag_seed = opt.seed;
        ctx.env_seed = opt.env_seed;
        ctx.log = &log;
        std::string out = opt.out_dir;
        if (out.empty()) {
            const auto& o = ctx.section("output");
            out = o.contains("dir") && o["dir"].is_string() ? ctx.resolve(o["dir"].get<std::string>()).string() : ".";
        }
        ctx.out_dir = out;
        fs::create_directories(ctx.out_dir);

        const int code = it->second(ctx);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_json(ctx.out_dir / "timing.json", json{{"mode", opt.mode}, {"wall_time_s", wall}, {"exit_code", code}});
        log << "wall time " << std::fixed << std::setprecision(3) << wall << " s\n";
        return code;
    } catch (const NumericalError& e) {
        log << "numerical failure [" << e.stage() << "]: " << e.what() << "\n";
        return kNumericalFailure;
    } catch (const ConfigError& e) {
        log << "config invalid: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const std::invalid_argument& e) {
        log << "config invalid: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const json::exception& e) {
        log << "config invalid: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const std::exception& e) {
        log << "error: " << e.what() << "\n";
        return kNumericalFailure;
    }
}

}  // namespace invgame::cli
