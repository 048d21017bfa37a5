#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace spf::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitNonConvergence = 3,
    kExitIo = 4,
};

struct CommandOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;  ///< overrides the config seed
    std::string out_dir = "out";
    std::string profile;                ///< empty: train.profile from the config, else "desk"
    std::string checkpoint;             ///< recover: checkpoint base path (empty: exact field)
    std::string resume;                 ///< train: checkpoint base path to resume from
    std::optional<std::uint64_t> until; ///< train: stop after this many steps (checkpoint written)
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);
/// Shortest round-trip decimal form; used for every number written to CSV.
std::string format_double(double v);

struct RunManifest {
    std::string command;
    std::string config_path;
    std::string config_hash;  ///< FNV-1a of the config bytes, 16 hex digits
    std::uint64_t seed = 0;
    std::string code_version;
    std::string started;   ///< ISO 8601 UTC
    std::string finished;
    std::vector<std::string> files;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const;
};

std::string utc_timestamp();

/// Comma-separated table with a header line.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header);
    void row(const std::vector<std::string>& cells);
    const std::string& text() const { return text_; }

private:
    std::size_t width_;
    std::string text_;
};

struct PlotSeries {
    std::string name;
    std::vector<double> xs;
    std::vector<double> ys;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series);

/// Trailing moving average (window >= 1).
std::vector<double> moving_average(const std::vector<double>& ys, std::size_t window);

int cmd_analyze_mdp(const CommandOptions& opt);
int cmd_solve_dtft(const CommandOptions& opt);
int cmd_verify_bounds(const CommandOptions& opt);
int cmd_train(const CommandOptions& opt);
int cmd_recover(const CommandOptions& opt);

/// Dispatches by command name; maps exceptions to exit codes and prints a
/// diagnostic to stderr.
int run_command(const std::string& command, const CommandOptions& opt);

}  // namespace spf::cli
