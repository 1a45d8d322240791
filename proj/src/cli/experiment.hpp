#pragma once

#include "invgame/invgame.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace invgame::cli {

using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kCertificateFailed = 1, kConfigInvalid = 2, kNumericalFailure = 3 };

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunOptions {
    std::string mode;
    std::string config_path;
    std::string out_dir;                    ///< empty: output.dir from the config, else "."
    std::optional<std::uint64_t> seed;      ///< --seed
    std::optional<std::uint64_t> env_seed;  ///< INVGAME_SEED
};

inline const std::vector<std::string>& modes() {
    static const std::vector<std::string> m{"solve-mb", "solve-mf", "solve-dist", "verify-ne", "family", "simulate"};
    return m;
}

/// YAML (any extension) or JSON text to a JSON document.
json parse_config_text(const std::string& text);
json load_config_file(const std::string& path);

/// Rejects unknown keys anywhere in the schema.
void check_schema(const json& cfg);

Matrix to_matrix(const json& j, const std::string& what);
json from_matrix(const Matrix& m);
LinearGameSystem parse_system(const json& j);
std::vector<std::vector<Matrix>> parse_R(const json& j, const LinearGameSystem& sys);
FeedbackProfile parse_targets(const json& j, const LinearGameSystem& sys);
json certificate_json(const NashCertificate& c);

std::optional<std::uint64_t> parse_seed(const std::string& text);

/// Runs one experiment and writes its artifacts into `out_dir`. Never throws;
/// failures map to exit codes with a message on `log`.
int run(const RunOptions& opt, std::ostream& log);

}  // namespace invgame::cli
