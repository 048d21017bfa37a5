#include <doctest.h>

#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "spf/cli_runner.hpp"
#include "spf/io.hpp"

using namespace spf;
using namespace spf::cli;
namespace fs = std::filesystem;

namespace {

std::string config_path(const std::string& name) { return std::string(SPF_SOURCE_DIR) + "/configs/" + name; }

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("spf_cli_" + name);
    fs::remove_all(p);
    return p;
}

CommandOptions opts(const std::string& config, const fs::path& out) {
    CommandOptions o;
    o.config_path = config;
    o.out_dir = out.string();
    return o;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::istringstream in(read_file(p.string()));
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cells.push_back(c);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p.string())); }

// Every file under `a` except the manifest has a byte-identical twin under `b`.
void check_same_outputs(const fs::path& a, const fs::path& b) {
    std::size_t compared = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
        const fs::path rel = fs::relative(e.path(), a);
        INFO(rel.string());
        CHECK(read_file(e.path().string()) == read_file((b / rel).string()));
        ++compared;
    }
    CHECK(compared > 0);
}

}  // namespace

TEST_CASE("helpers") {
    CHECK(hex64(fnv1a("")) == "cbf29ce484222325");
    CHECK(hex64(fnv1a("a")) == "af63dc4c8601ec8c");
    CHECK(std::stod(format_double(0.1)) == 0.1);
    CHECK(format_double(2.0) == "2");
    CHECK(moving_average({1, 2, 3, 4}, 2) == std::vector<double>{1, 1.5, 2.5, 3.5});
    CHECK_THROWS_AS(moving_average({1}, 0), std::invalid_argument);
    CsvWriter csv({"a", "b"});
    csv.row({"1", "2"});
    CHECK(csv.text() == "a,b\n1,2\n");
    CHECK_THROWS_AS(csv.row({"1"}), std::invalid_argument);
    const std::string svg = svg_line_plot("t", "x", "y", {{"s", {0, 1, 2}, {1, 4, 9}}});
    CHECK(svg.find("<polyline") != std::string::npos);
    CHECK(svg.rfind("</svg>") != std::string::npos);
}

TEST_CASE("analyze-mdp reports the global period") {
    const auto out = fresh_dir("analyze");
    REQUIRE(run_command("analyze-mdp", opts(config_path("three_cycle.toml"), out / "a")) == kExitOk);
    CHECK(read_json(out / "a" / "period_report.json")["global_period"] == 3);
    REQUIRE(run_command("analyze-mdp", opts(config_path("block_2_3.toml"), out / "b")) == kExitOk);
    const auto rep = read_json(out / "b" / "period_report.json");
    CHECK(rep["global_period"] == 6);
    CHECK(rep["empirical_period"] == 6);
    const auto manifest = read_json(out / "b" / "manifest.json");
    CHECK(manifest["config_hash"] == hex64(fnv1a(read_file(config_path("block_2_3.toml")))));
    for (const auto& f : manifest["files"]) CHECK(fs::exists(out / "b" / f.get<std::string>()));
}

TEST_CASE("bad configs exit 2 without writing files") {
    const auto out = fresh_dir("bad");
    const auto cfg = fs::temp_directory_path() / "spf_bad.toml";
    write_atomic(cfg.string(), "[mdp]\nn_states = 3\ntransition = [1,\n");
    CHECK(run_command("analyze-mdp", opts(cfg.string(), out)) == kExitConfig);
    CHECK_FALSE(fs::exists(out));
    write_atomic(cfg.string(), "[mdp]\nn_states = 2\nn_actions = 1\ntransition = [0.5, 0.4, 1, 0]\n"
                               "reward = [0, 0]\ninitial_dist = [1, 0]\ngamma = 0.9\n");
    CHECK(run_command("solve-dtft", opts(cfg.string(), out)) == kExitConfig);
    CHECK_FALSE(fs::exists(out));
    CHECK(run_command("analyze-mdp", opts("/nonexistent/spf.toml", out)) == kExitIo);
    CHECK(run_command("nonsense", opts(cfg.string(), out)) == kExitConfig);
}

TEST_CASE("solve-dtft writes the field and flags non-convergence") {
    const auto out = fresh_dir("solve");
    REQUIRE(run_command("solve-dtft", opts(config_path("single_state.toml"), out / "s")) == kExitOk);
    const auto rows = read_csv(out / "s" / "field.csv");
    CHECK(rows[0] == std::vector<std::string>{"state", "action", "bin", "omega", "dim", "re", "im"});
    CHECK(std::stod(rows[1][5]) == doctest::Approx(2.0).epsilon(1e-12));
    const auto cfg = fs::temp_directory_path() / "spf_maxiter.toml";
    std::string text = read_file(config_path("three_cycle.toml"));
    text.replace(text.find("max_iter = 100000"), 17, "max_iter = 1");
    write_atomic(cfg.string(), text);
    CHECK(run_command("solve-dtft", opts(cfg.string(), out / "m")) == kExitNonConvergence);
    CHECK(read_json(out / "m" / "convergence.json")["converged"] == false);
}

TEST_CASE("verify-bounds suite verdicts") {
    const auto out = fresh_dir("bounds");
    REQUIRE(run_command("verify-bounds", opts(config_path("bounds_suite.toml"), out)) == kExitOk);
    const auto rows = read_csv(out / "bounds.csv");
    std::size_t t3_holds = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& r = rows[i];
        CHECK(r[8] != "violated");
        if (r[0] == "identical" && r[1] == "1") CHECK(r[6] == r[4]);
        if (r[0] == "undecaying") CHECK(r[8] == "inapplicable");
        if (r[1] == "3" && r[8] == "holds") ++t3_holds;
    }
    CHECK(t3_holds >= 20);
}

TEST_CASE("train emits header-only metrics for zero steps") {
    const auto out = fresh_dir("zero");
    CommandOptions o = opts(config_path("cycle_walk.toml"), out);
    o.until = 0;
    REQUIRE(run_command("train", o) == kExitOk);
    CHECK(read_file((out / "metrics.csv").string()) == "step,L_pred,raw_lo_term,mid_term,raw_hi_term,episodic_return\n");
    CHECK(fs::exists(out / "checkpoints" / "step_0.json"));
}

TEST_CASE("train is reproducible and resumes without a seam") {
    const auto out = fresh_dir("train");
    REQUIRE(run_command("train", opts(config_path("cycle_walk.toml"), out / "a")) == kExitOk);
    REQUIRE(run_command("train", opts(config_path("cycle_walk.toml"), out / "b")) == kExitOk);
    check_same_outputs(out / "a", out / "b");

    CommandOptions part = opts(config_path("cycle_walk.toml"), out / "c");
    part.until = 2000;
    REQUIRE(run_command("train", part) == kExitOk);
    CommandOptions rest = opts(config_path("cycle_walk.toml"), out / "c");
    rest.resume = (out / "c" / "checkpoints" / "step_2000").string();
    REQUIRE(run_command("train", rest) == kExitOk);
    check_same_outputs(out / "a", out / "c");
    const auto manifest = read_json(out / "a" / "manifest.json");
    CHECK(manifest["extra"].contains("return_smoothing_window"));
}

TEST_CASE("recover on the exact and learned cycle-walk fields") {
    const auto out = fresh_dir("recover");
    REQUIRE(run_command("recover", opts(config_path("cycle_walk.toml"), out / "exact")) == kExitOk);
    const auto manifest = read_json(out / "exact" / "manifest.json");
    const double bound = manifest["extra"]["aliasing_bound"];
    const auto summary = read_csv(out / "exact" / "recovery_summary.csv");
    REQUIRE(summary.size() == 6);
    for (std::size_t i = 1; i < summary.size(); ++i) CHECK(std::stod(summary[i][2]) <= bound + 1e-8);
    CHECK_FALSE(manifest["extra"].contains("warning"));

    const auto cfg = fs::temp_directory_path() / "spf_recover_alias.toml";
    std::string text = read_file(config_path("cycle_walk.toml"));
    text.replace(text.find("k_max = 5"), 9, "k_max = 70");
    write_atomic(cfg.string(), text);
    REQUIRE(run_command("recover", opts(cfg.string(), out / "alias")) == kExitOk);
    CHECK(read_json(out / "alias" / "manifest.json")["extra"].contains("warning"));

    REQUIRE(run_command("train", opts(config_path("cycle_walk.toml"), out / "run")) == kExitOk);
    CommandOptions o = opts(config_path("cycle_walk.toml"), out / "learned");
    o.checkpoint = (out / "run" / "checkpoints" / "step_4000").string();
    REQUIRE(run_command("recover", o) == kExitOk);
    const auto learned = read_csv(out / "learned" / "recovery_summary.csv");
    CHECK(std::stod(learned[1][1]) < std::stod(learned[5][1]));
}
