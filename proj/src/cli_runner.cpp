#include "spf/cli_runner.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "spf/bounds_lab.hpp"
#include "spf/config.hpp"
#include "spf/dtft_engine.hpp"
#include "spf/io.hpp"
#include "spf/mdp_core.hpp"
#include "spf/spectral_analysis.hpp"
#include "spf/spf_trainer.hpp"

#ifndef SPF_LAB_VERSION
#define SPF_LAB_VERSION "0.0.0"
#endif

namespace spf::cli {

namespace fs = std::filesystem;
using config::ConfigError;
using nlohmann::json;

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return out;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json RunManifest::to_json() const {
    json j;
    j["command"] = command;
    j["config_path"] = config_path;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["code_version"] = code_version;
    j["started"] = started;
    j["finished"] = finished;
    j["files"] = files;
    j["extra"] = extra;
    return j;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) {
    for (std::size_t i = 0; i < header.size(); ++i) text_ += (i ? "," : "") + header[i];
    text_ += '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw std::invalid_argument("CsvWriter: row width differs from the header");
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += '\n';
}

std::vector<double> moving_average(const std::vector<double>& ys, std::size_t window) {
    if (window == 0) throw std::invalid_argument("moving_average: window must be >= 1");
    std::vector<double> out(ys.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        acc += ys[i];
        if (i >= window) acc -= ys[i - window];
        out[i] = acc / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

namespace {

std::string fixed(double v, int digits = 2) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(digits);
    ss << v;
    return ss.str();
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// Roughly five round tick values covering [lo, hi].
std::vector<double> nice_ticks(double lo, double hi) {
    const double span = hi - lo;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (raw <= m * mag) {
            step = m * mag;
            break;
        }
    std::vector<double> ticks;
    for (double t = std::ceil(lo / step) * step; t <= hi + 1e-9 * span; t += step) ticks.push_back(t);
    return ticks;
}

std::string tick_label(double v) {
    std::ostringstream ss;
    ss.precision(4);
    ss << (std::abs(v) < 1e-12 ? 0.0 : v);
    return ss.str();
}

}  // namespace

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    const double W = 720, H = 440, left = 80, right = 170, top = 40, bottom = 60;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    bool any = false;
    for (const auto& s : series) {
        if (s.xs.size() != s.ys.size()) throw std::invalid_argument("svg_line_plot: xs and ys differ in length");
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
            if (!any) {
                x0 = x1 = s.xs[i];
                y0 = y1 = s.ys[i];
                any = true;
            }
            x0 = std::min(x0, s.xs[i]);
            x1 = std::max(x1, s.xs[i]);
            y0 = std::min(y0, s.ys[i]);
            y1 = std::max(y1, s.ys[i]);
        }
    }
    if (x1 <= x0) x1 = x0 + 1.0;
    if (y1 <= y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    const double pw = W - left - right, ph = H - top - bottom;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape_xml(title)
        << "</text>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (double t : nice_ticks(x0, x1)) {
        svg << "<line x1=\"" << fixed(px(t)) << "\" y1=\"" << top + ph << "\" x2=\"" << fixed(px(t)) << "\" y2=\""
            << top + ph + 5 << "\" stroke=\"#333\"/>\n";
        svg << "<text x=\"" << fixed(px(t)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
            << tick_label(t) << "</text>\n";
    }
    for (double t : nice_ticks(y0, y1)) {
        svg << "<line x1=\"" << left - 5 << "\" y1=\"" << fixed(py(t)) << "\" x2=\"" << left + pw << "\" y2=\""
            << fixed(py(t)) << "\" stroke=\"#ddd\"/>\n";
        svg << "<text x=\"" << left - 8 << "\" y=\"" << fixed(py(t) + 4) << "\" text-anchor=\"end\">" << tick_label(t)
            << "</text>\n";
    }
    svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << escape_xml(x_label)
        << "</text>\n";
    svg << "<text x=\"18\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
        << top + ph / 2 << ")\">" << escape_xml(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = colors[k % 6];
        std::string points;
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
            points += fixed(px(s.xs[i])) + "," + fixed(py(s.ys[i])) + " ";
        }
        if (!points.empty())
            svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << points
                << "\"/>\n";
        const double ly = top + 14 + 18.0 * static_cast<double>(k);
        svg << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 32 << "\" y2=\"" << ly
            << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape_xml(s.name) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

// ---- command plumbing ------------------------------------------------------------------------------

namespace {

class NonConvergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LoadedConfig {
    std::string text;
    config::Table root;
};

LoadedConfig load_config(const std::string& path) {
    if (path.empty()) throw ConfigError("--config is required");
    LoadedConfig c;
    c.text = read_file(path);
    c.root = config::parse(c.text);
    return c;
}

std::uint64_t resolve_seed(const CommandOptions& opt, const config::Table& root, const std::string& key) {
    if (opt.seed) return *opt.seed;
    return static_cast<std::uint64_t>(config::get_count(root, key, 0));
}

/// Collects outputs under one directory and writes manifest.json last.
class Outputs {
public:
    Outputs(const std::string& command, const CommandOptions& opt, const LoadedConfig& cfg, std::uint64_t seed)
        : dir_(opt.out_dir) {
        manifest_.command = command;
        manifest_.config_path = opt.config_path;
        manifest_.config_hash = hex64(fnv1a(cfg.text));
        manifest_.seed = seed;
        manifest_.code_version = SPF_LAB_VERSION;
        manifest_.started = utc_timestamp();
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw IoError("cannot create output directory " + dir_.string());
    }

    void write(const std::string& name, const std::string& content) {
        const fs::path p = dir_ / name;
        if (p.has_parent_path()) {
            std::error_code ec;
            fs::create_directories(p.parent_path(), ec);
            if (ec) throw IoError("cannot create directory " + p.parent_path().string());
        }
        write_atomic(p.string(), content);
        note(name);
    }

    void note(const std::string& name) {
        if (std::find(manifest_.files.begin(), manifest_.files.end(), name) == manifest_.files.end())
            manifest_.files.push_back(name);
    }

    fs::path path(const std::string& name) const { return dir_ / name; }
    json& extra() { return manifest_.extra; }

    void finish() {
        manifest_.finished = utc_timestamp();
        manifest_.files.push_back("manifest.json");
        write_atomic((dir_ / "manifest.json").string(), manifest_.to_json().dump(2) + "\n");
    }

private:
    fs::path dir_;
    RunManifest manifest_;
};

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

json complex_vector(const std::vector<std::complex<double>>& v) {
    json out = json::array();
    for (const auto& c : v) out.push_back({c.real(), c.imag()});
    return out;
}

}  // namespace

// ---- analyze-mdp -------------------------------------------------------------------------------------

int cmd_analyze_mdp(const CommandOptions& opt) {
    const LoadedConfig cfg = load_config(opt.config_path);
    const TabularMdp mdp = mdp_from_config(cfg.root, "mdp");
    const TabularPolicy pol = policy_from_config(cfg.root, mdp, "policy");
    const std::size_t steps = config::get_count(cfg.root, "analysis.steps", 400);
    // Default burn-in: the first half of the simulated horizon.
    const std::size_t tail = config::get_count(cfg.root, "analysis.tail", (steps + 1) - (steps + 1) / 2);
    const double tol = config::get_number(cfg.root, "analysis.tol", 1e-6);
    if (tail < 2 || tail > steps + 1) throw ConfigError("tail must lie in [2, steps + 1]", 0, "analysis.tail");
    const std::uint64_t seed = resolve_seed(opt, cfg.root, "seed");

    const Matrix chain = induced_chain(mdp, pol);
    check_stochastic(chain);
    const CanonicalDecomposition dec = decompose(chain);
    PeriodReport report = asymptotic_period(chain, dec);
    const std::vector<Vector> evo = distribution_evolution(chain, mdp.initial_dist(), steps);
    std::span<const Vector> tail_span(evo.data() + (evo.size() - tail), tail);
    std::optional<std::size_t> empirical;
    try {
        empirical = detect_empirical_period(tail_span, tol);
    } catch (const NoPeriodDetected&) {
        empirical.reset();
    }
    report.empirical_period = empirical;

    json j;
    j["n_states"] = mdp.n_states();
    j["recurrent_classes"] = dec.recurrent_classes;
    j["transient_states"] = dec.transient_states;
    j["class_periods"] = report.class_periods;
    j["global_period"] = report.global_period;
    j["eigen_counts"] = report.eigen_counts ? json(*report.eigen_counts) : json(nullptr);
    j["empirical_period"] = empirical ? json(*empirical) : json(nullptr);
    j["empirical_tol"] = tol;
    json eig = json::array();
    for (const auto& cls : dec.recurrent_classes) {
        try {
            eig.push_back(complex_vector(eigenvalues(submatrix(chain, cls))));
        } catch (const AnalysisFailure&) {
            eig.push_back(nullptr);
        }
    }
    j["class_eigenvalues"] = eig;

    std::vector<std::string> header = {"t"};
    for (std::size_t s = 0; s < mdp.n_states(); ++s) header.push_back("p" + std::to_string(s));
    CsvWriter csv(header);
    for (std::size_t t = 0; t < evo.size(); ++t) {
        std::vector<std::string> row = {std::to_string(t)};
        for (Eigen::Index s = 0; s < evo[t].size(); ++s) row.push_back(format_double(evo[t](s)));
        csv.row(row);
    }

    Outputs out("analyze-mdp", opt, cfg, seed);
    out.write("period_report.json", json_text(j));
    out.write("evolution.csv", csv.text());
    out.finish();
    std::cout << "global period " << report.global_period << ", empirical period "
              << (empirical ? std::to_string(*empirical) : std::string("none")) << "\n";
    return kExitOk;
}

// ---- solve-dtft --------------------------------------------------------------------------------------

int cmd_solve_dtft(const CommandOptions& opt) {
    const LoadedConfig cfg = load_config(opt.config_path);
    const TabularMdp mdp = mdp_from_config(cfg.root, "mdp");
    const TabularPolicy pol = policy_from_config(cfg.root, mdp, "policy");
    DtftConfig dc;
    dc.L = config::get_count(cfg.root, "dtft.L", 16);
    dc.D = mdp.dim();
    dc.gamma = mdp.gamma();
    dc.half_spectrum = config::get_bool(cfg.root, "dtft.half_spectrum", true);
    try {
        dc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), 0, "dtft");
    }
    const double tol = config::get_number(cfg.root, "dtft.tol", 1e-10);
    const std::size_t max_iter = config::get_count(cfg.root, "dtft.max_iter", 1'000'000);
    if (!(tol > 0.0)) throw ConfigError("tol must be positive", 0, "dtft.tol");
    if (max_iter == 0) throw ConfigError("max_iter must be positive", 0, "dtft.max_iter");
    const std::uint64_t seed = resolve_seed(opt, cfg.root, "seed");

    const DtftSolveResult res = solve_dtft_fixed_point(mdp, pol, dc, tol, max_iter);
    CsvWriter csv({"state", "action", "bin", "omega", "dim", "re", "im"});
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
            const DtftMatrix& m = res.field.at(s, a);
            for (std::size_t k = 0; k < m.rows; ++k)
                for (std::size_t d = 0; d < m.cols; ++d)
                    csv.row({std::to_string(s), std::to_string(a), std::to_string(k), format_double(dc.omega(k)),
                             std::to_string(d), format_double(m(k, d).real()), format_double(m(k, d).imag())});
        }
    json j;
    j["converged"] = res.converged;
    j["iterations"] = res.iterations;
    j["last_change"] = res.last_change;
    j["bellman_residual"] = res.bellman_residual;
    j["tol"] = tol;
    j["max_iter"] = max_iter;
    j["L"] = dc.L;
    j["gamma"] = dc.gamma;
    j["half_spectrum"] = dc.half_spectrum;
    j["field_norm"] = field_norm(res.field);

    Outputs out("solve-dtft", opt, cfg, seed);
    out.write("field.csv", csv.text());
    out.write("convergence.json", json_text(j));
    out.finish();
    if (!res.converged)
        throw NonConvergence("fixed-point iteration stopped after " + std::to_string(res.iterations) +
                             " sweeps with change " + format_double(res.last_change));
    std::cout << "converged in " << res.iterations << " sweeps, residual " << res.bellman_residual << "\n";
    return kExitOk;
}

// ---- verify-bounds -----------------------------------------------------------------------------------

int cmd_verify_bounds(const CommandOptions& opt) {
    const LoadedConfig cfg = load_config(opt.config_path);
    const config::Table& root = cfg.root;
    const std::uint64_t seed = resolve_seed(opt, root, "bounds.seed");
    const std::size_t t1_count = config::get_count(root, "bounds.theorem1_instances", 0);
    const std::size_t t1_states = config::get_count(root, "bounds.theorem1_states", 3);
    const std::size_t t1_actions = config::get_count(root, "bounds.theorem1_actions", 2);
    const std::size_t t1_horizon = config::get_count(root, "bounds.theorem1_horizon", 8);
    const std::size_t t3_count = config::get_count(root, "bounds.theorem3_instances", 0);
    const std::size_t t3_states = config::get_count(root, "bounds.theorem3_states", 4);
    const std::size_t t3_actions = config::get_count(root, "bounds.theorem3_actions", 2);
    const std::size_t t3_dim = config::get_count(root, "bounds.theorem3_dim", 2);
    const std::size_t t3_horizon = config::get_count(root, "bounds.theorem3_horizon", 200);
    const std::size_t dft_size = config::get_count(root, "bounds.dft_size", 4096);
    const bool undecaying = config::get_bool(root, "bounds.include_undecaying", false);
    const bool identical = config::get_bool(root, "bounds.include_identical", false);
    std::vector<double> gammas = {0.9};
    if (config::lookup(root, "bounds.gammas")) gammas = config::get_numbers(root, "bounds.gammas");
    std::vector<std::size_t> degrees = {1, 2};
    if (config::lookup(root, "bounds.theorem3_degrees")) {
        degrees.clear();
        for (auto d : config::get_ints(root, "bounds.theorem3_degrees")) {
            if (d < 1 || d > static_cast<std::int64_t>(kMaxRewardDegree))
                throw ConfigError("degrees must lie in [1, 4]", 0, "bounds.theorem3_degrees");
            degrees.push_back(static_cast<std::size_t>(d));
        }
    }
    if (gammas.empty() || degrees.empty()) throw ConfigError("gammas and degrees must be non-empty", 0, "bounds");
    for (double g : gammas)
        if (!(g >= 0.0 && g < 1.0)) throw ConfigError("gamma must lie in [0, 1)", 0, "bounds.gammas");

    CsvWriter csv({"instance_id", "theorem", "gamma", "lhs", "rhs", "rhs_lower", "slack", "holds", "verdict"});
    std::size_t violated = 0;
    std::size_t index = 0;
    auto add_t1 = [&](const std::string& name, const TabularMdp& mdp, const TabularPolicy& p1,
                      const TabularPolicy& p2, std::size_t horizon) {
        const Theorem1Result r = verify_theorem1(mdp, p1, p2, horizon);
        if (!r.holds) ++violated;
        csv.row({name, "1", format_double(mdp.gamma()), format_double(r.lhs), format_double(r.rhs),
                 format_double(r.rhs), format_double(r.rhs - r.lhs), r.holds ? "true" : "false",
                 r.holds ? "holds" : "violated"});
    };
    auto add_t3 = [&](const std::string& name, const BoundsInstance& inst, std::size_t horizon) {
        const Theorem3Result r = verify_theorem3(inst.mdp, inst.pi1, inst.pi2, inst.reward, horizon, dft_size);
        if (r.verdict == "violated") ++violated;
        csv.row({name, "3", format_double(inst.mdp.gamma()), format_double(r.lhs), format_double(r.rhs),
                 format_double(r.rhs_lower), format_double(r.rhs - r.lhs), r.holds ? "true" : "false", r.verdict});
    };

    // Explicit instance from [mdp] with [policy] and [policy2].
    if (config::lookup(root, "mdp")) {
        const TabularMdp mdp = mdp_from_config(root, "mdp");
        const TabularPolicy p1 = policy_from_config(root, mdp, "policy");
        const TabularPolicy p2 = config::lookup(root, "policy2") ? policy_from_config(root, mdp, "policy2") : p1;
        add_t1("config", mdp, p1, p2, t1_horizon);
        if (config::lookup(root, "reward.coefficients")) {
            const std::vector<double> flat = config::get_numbers(root, "reward.coefficients");
            const std::size_t D = mdp.dim();
            if (flat.empty() || flat.size() % D != 0)
                throw ConfigError("coefficients must hold (degree + 1) * D numbers", 0, "reward.coefficients");
            PolynomialReward reward;
            for (std::size_t k = 0; k < flat.size() / D; ++k)
                reward.coefficients.push_back(
                    Eigen::Map<const Vector>(flat.data() + k * D, static_cast<Eigen::Index>(D)));
            try {
                reward.validate();
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what(), 0, "reward.coefficients");
            }
            add_t3("config", BoundsInstance{"config", mdp, p1, p2, reward}, t3_horizon);
        }
    }
    Rng rng(seed, 7);
    for (std::size_t i = 0; i < t1_count; ++i) {
        const double g = gammas[i % gammas.size()];
        const BoundsInstance inst = theorem1_instance(t1_states, t1_actions, g, rng);
        add_t1("t1_" + std::to_string(index++), inst.mdp, inst.pi1, inst.pi2, t1_horizon);
    }
    for (std::size_t i = 0; i < t3_count; ++i) {
        const double g = gammas[i % gammas.size()];
        const std::size_t degree = degrees[i % degrees.size()];
        const BoundsInstance inst = theorem3_instance(t3_states, t3_actions, t3_dim, degree, g, rng);
        add_t3("t3_" + std::to_string(index++), inst, t3_horizon);
    }
    if (identical) {
        BoundsInstance inst = theorem3_instance(t3_states, t3_actions, t3_dim, degrees.front(), gammas.front(), rng);
        inst.pi2 = inst.pi1;
        const TabularMdp rewarded = inst.mdp.with_reward(inst.reward.state_rewards(inst.mdp));
        add_t1("identical", rewarded, inst.pi1, inst.pi2, t1_horizon);
        add_t3("identical", inst, t3_horizon);
    }
    if (undecaying) add_t3("undecaying", undecaying_instance(gammas.front()), t3_horizon);

    Outputs out("verify-bounds", opt, cfg, seed);
    out.write("bounds.csv", csv.text());
    out.extra()["violated"] = violated;
    out.finish();
    std::cout << "bounds checked, " << violated << " violated\n";
    return kExitOk;
}

// ---- train ---------------------------------------------------------------------------------------------

namespace {

std::string resolve_profile(const CommandOptions& opt, const config::Table& root) {
    if (!opt.profile.empty()) return opt.profile;
    return config::get_string(root, "train.profile", "desk");
}

std::string metric_line(const MetricRow& r) {
    std::string line = std::to_string(r.step) + ",";
    if (r.aux_performed)
        line += format_double(r.loss) + "," + format_double(r.lo) + "," + format_double(r.mid) + "," +
                format_double(r.hi);
    else
        line += ",,,";
    line += ",";
    if (r.episodic_return) line += format_double(*r.episodic_return);
    return line + "\n";
}

const char* kMetricsHeader = "step,L_pred,raw_lo_term,mid_term,raw_hi_term,episodic_return\n";
const char* kEvalHeader = "step,episode,return\n";

// Lines of an existing CSV whose first column (the step) is <= limit.
std::string kept_rows(const fs::path& path, std::uint64_t limit) {
    if (!fs::exists(path)) return {};
    std::istringstream in(read_file(path.string()));
    std::string line, out;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        const std::uint64_t step = std::stoull(line.substr(0, comma));
        if (step <= limit) out += line + "\n";
    }
    return out;
}

}  // namespace

int cmd_train(const CommandOptions& opt) {
    const LoadedConfig cfg = load_config(opt.config_path);
    const std::string profile = resolve_profile(opt, cfg.root);
    const std::uint64_t seed = resolve_seed(opt, cfg.root, "train.seed");
    std::unique_ptr<Trainer> trainer = make_trainer(cfg.root, profile, seed);
    const TrainConfig& tc = trainer->config();
    const std::uint64_t until = std::min<std::uint64_t>(opt.until.value_or(tc.total_steps), tc.total_steps);
    const std::size_t return_window = config::get_count(cfg.root, "train.smoothing_window", 10);
    if (return_window == 0) throw ConfigError("smoothing_window must be >= 1", 0, "train.smoothing_window");

    Outputs out("train", opt, cfg, seed);
    std::string metrics_rows, eval_rows;
    std::size_t metrics_seen = 0, eval_seen = 0;
    if (!opt.resume.empty()) {
        trainer->load(opt.resume);
        const std::uint64_t at = trainer->trace().steps_done;
        metrics_rows = kept_rows(out.path("metrics.csv"), at);
        eval_rows = kept_rows(out.path("eval.csv"), at);
        out.extra()["resumed_from"] = opt.resume;
        out.extra()["resumed_at_step"] = at;
    }

    auto flush_rows = [&]() {
        const TrainRun& run = trainer->trace();
        for (; metrics_seen < run.metrics.size(); ++metrics_seen) metrics_rows += metric_line(run.metrics[metrics_seen]);
        for (; eval_seen < run.eval_returns.size(); ++eval_seen) {
            // Episode index within its evaluation round.
            std::size_t ep = 0;
            for (std::size_t j = eval_seen; j > 0 && run.eval_steps[j - 1] == run.eval_steps[eval_seen]; --j) ++ep;
            eval_rows += std::to_string(run.eval_steps[eval_seen]) + "," + std::to_string(ep) + "," +
                         format_double(run.eval_returns[eval_seen]) + "\n";
        }
        out.write("metrics.csv", kMetricsHeader + metrics_rows);
        out.write("eval.csv", kEvalHeader + eval_rows);
    };
    auto checkpoint = [&](std::uint64_t step) {
        const std::string name = "checkpoints/step_" + std::to_string(step);
        fs::create_directories(out.path("checkpoints"));
        trainer->save(out.path(name).string());
        out.note(name + ".json");
        out.note(name + ".bin");
        flush_rows();
    };

    if (opt.resume.empty()) checkpoint(0);
    trainer->on_step = [&](Trainer&, std::uint64_t step) {
        if (tc.checkpoint_interval > 0 && step % tc.checkpoint_interval == 0 && step < until) checkpoint(step);
    };
    trainer->run_until(until);

    const std::uint64_t done = trainer->trace().steps_done;
    std::vector<double> final_eval;
    const bool final_due = done == tc.total_steps && done > 0 && tc.eval_episodes > 0 &&
                           (tc.eval_interval == 0 || done % tc.eval_interval != 0);
    if (final_due) final_eval = trainer->evaluate(tc.eval_episodes, done);
    if (done > 0) checkpoint(done);
    for (std::size_t i = 0; i < final_eval.size(); ++i)
        eval_rows += std::to_string(done) + "," + std::to_string(i) + "," + format_double(final_eval[i]) + "\n";
    flush_rows();

    // Curves come from the full CSV text so resumed runs plot the whole history.
    std::vector<double> ep_x, ep_y, loss_x, loss_y;
    {
        std::istringstream in(metrics_rows);
        std::string line;
        while (std::getline(in, line)) {
            std::vector<std::string> cells;
            std::stringstream ls(line);
            std::string c;
            while (std::getline(ls, c, ',')) cells.push_back(c);
            while (cells.size() < 6) cells.emplace_back();
            const double step = std::stod(cells[0]);
            if (!cells[1].empty()) {
                loss_x.push_back(step);
                loss_y.push_back(std::stod(cells[1]));
            }
            if (!cells[5].empty()) {
                ep_x.push_back(step);
                ep_y.push_back(std::stod(cells[5]));
            }
        }
    }
    std::vector<double> ev_x, ev_y;
    {
        std::istringstream in(eval_rows);
        std::string line;
        while (std::getline(in, line)) {
            const auto a = line.find(',');
            const auto b = line.rfind(',');
            const double step = std::stod(line.substr(0, a));
            const double r = std::stod(line.substr(b + 1));
            if (ev_x.empty() || ev_x.back() != step) {
                ev_x.push_back(step);
                ev_y.push_back(0.0);
            }
            ev_y.back() += r;
        }
        std::size_t j = 0;
        std::istringstream again(eval_rows);
        std::vector<std::size_t> counts(ev_x.size(), 0);
        while (std::getline(again, line)) {
            const double step = std::stod(line.substr(0, line.find(',')));
            while (ev_x[j] != step) ++j;
            ++counts[j];
        }
        for (std::size_t i = 0; i < ev_y.size(); ++i) ev_y[i] /= static_cast<double>(counts[i]);
    }
    const std::size_t loss_window = std::max<std::size_t>(1, loss_y.size() / 100);
    out.write("learning_curve.svg",
              svg_line_plot("Episodic return", "environment step", "return",
                            {{"training (moving average)", ep_x, moving_average(ep_y, return_window)},
                             {"evaluation mean", ev_x, ev_y}}));
    out.write("loss_curve.svg", svg_line_plot("Auxiliary loss", "environment step", "L_pred",
                                              {{"L_pred (moving average)", loss_x, moving_average(loss_y, loss_window)}}));
    out.extra()["profile"] = profile;
    out.extra()["steps_done"] = done;
    out.extra()["total_steps"] = tc.total_steps;
    out.extra()["return_smoothing_window"] = return_window;
    out.extra()["loss_smoothing_window"] = loss_window;
    out.finish();
    std::cout << "trained " << done << " of " << tc.total_steps << " steps\n";
    return kExitOk;
}

// ---- recover -------------------------------------------------------------------------------------------

int cmd_recover(const CommandOptions& opt) {
    const LoadedConfig cfg = load_config(opt.config_path);
    const config::Table& root = cfg.root;
    const std::uint64_t seed = resolve_seed(opt, root, "train.seed");
    const std::size_t k_max = config::get_count(root, "recover.k_max", 5);
    if (k_max == 0) throw ConfigError("k_max must be >= 1", 0, "recover.k_max");
    std::unique_ptr<Env> env = env_from_config(root);
    const auto* tab = dynamic_cast<const TabularEnv*>(env.get());
    if (tab == nullptr) throw ConfigError("recover needs a tabular environment", 0, "env.kind");
    const TabularMdp& mdp = tab->mdp();
    const std::size_t S = mdp.n_states(), A = mdp.n_actions(), D = mdp.dim();
    const double gamma = mdp.gamma();

    std::unique_ptr<Trainer> trainer;
    std::size_t L = config::get_count(root, "net.L", 128);
    TabularPolicy pol = policy_from_config(root, mdp, "policy");
    if (!opt.checkpoint.empty()) {
        trainer = make_trainer(root, resolve_profile(opt, root), seed);
        trainer->load(opt.checkpoint);
        L = trainer->nets().config().L;
        // The learned field targets the agent's greedy bootstrap policy.
        if (auto* q = dynamic_cast<TabularQAgent*>(&trainer->agent())) {
            std::vector<std::size_t> greedy(S);
            for (std::size_t s = 0; s < S; ++s) greedy[s] = q->greedy(s);
            pol = TabularPolicy::deterministic(greedy, A);
        }
    }
    DtftConfig dc{L, D, gamma, true};
    try {
        dc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what(), 0, "net.L");
    }

    std::optional<DtftField> exact;
    if (!trainer) {
        DtftSolveResult res = solve_dtft_fixed_point(mdp, pol, dc);
        if (!res.converged) throw NonConvergence("exact field did not converge");
        exact = std::move(res.field);
    }

    // True expected embeddings k steps ahead: P(.|s,a) M^(k-1) E.
    const Matrix chain = induced_chain(mdp, pol);
    const Matrix& emb = mdp.embedding();
    const double bound = aliasing_bound(gamma, L, emb.cwiseAbs().maxCoeff());
    CsvWriter csv({"state", "action", "k", "dim", "true", "recovered", "abs_error", "aliased"});
    std::vector<double> err_sum(k_max, 0.0);
    std::vector<double> err_max(k_max, 0.0);
    bool any_aliased = false;
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            const auto next = mdp.next_dist(s, a);
            const Vector dist = Eigen::Map<const Vector>(next.data(), static_cast<Eigen::Index>(next.size()));
            DtftMatrix spectrum;
            if (trainer) {
                Vector raw(1);
                raw(0) = static_cast<double>(a);
                spectrum = predict_dtft(trainer->nets(), false, emb.row(static_cast<Eigen::Index>(s)).transpose(), raw)
                               .to_dtft();
            } else {
                spectrum = exact->at(s, a);
            }
            Vector row_dist = dist;
            for (std::size_t k = 1; k <= k_max; ++k) {
                if (k > 1) row_dist = (row_dist.transpose() * chain).transpose();
                const Vector truth = emb.transpose() * row_dist;
                const RecoveredState rec = recover_state(spectrum, L, true, k, gamma);
                any_aliased = any_aliased || rec.aliased;
                const double err = (rec.state - truth).norm();
                err_sum[k - 1] += err;
                err_max[k - 1] = std::max(err_max[k - 1], err);
                for (std::size_t d = 0; d < D; ++d) {
                    const auto di = static_cast<Eigen::Index>(d);
                    csv.row({std::to_string(s), std::to_string(a), std::to_string(k), std::to_string(d),
                             format_double(truth(di)), format_double(rec.state(di)),
                             format_double(std::abs(rec.state(di) - truth(di))), rec.aliased ? "true" : "false"});
                }
            }
        }

    CsvWriter summary({"k", "mean_error", "max_error", "aliasing_bound"});
    std::vector<double> ks, means;
    for (std::size_t k = 1; k <= k_max; ++k) {
        const double mean = err_sum[k - 1] / static_cast<double>(S * A);
        ks.push_back(static_cast<double>(k));
        means.push_back(mean);
        summary.row({std::to_string(k), format_double(mean), format_double(err_max[k - 1]), format_double(bound)});
    }

    Outputs out("recover", opt, cfg, seed);
    out.write("recovery.csv", csv.text());
    out.write("recovery_summary.csv", summary.text());
    out.write("recovery.svg", svg_line_plot("Recovery error by horizon", "k (steps ahead)", "mean |s_hat - s|",
                                            {{trainer ? "learned predictor" : "exact field", ks, means}}));
    out.extra()["source"] = trainer ? opt.checkpoint : std::string("exact");
    out.extra()["L"] = L;
    out.extra()["aliasing_bound"] = bound;
    if (any_aliased || k_max > L) out.extra()["warning"] = "k exceeds the sample grid; recovered states are aliased";
    out.finish();
    if (any_aliased) std::cerr << "warning: k exceeds the sample grid (L = " << L << "); results are aliased\n";
    std::cout << "recovery mean error k=1: " << means.front() << ", k=" << k_max << ": " << means.back() << "\n";
    return kExitOk;
}

int run_command(const std::string& command, const CommandOptions& opt) {
    try {
        if (command == "analyze-mdp") return cmd_analyze_mdp(opt);
        if (command == "solve-dtft") return cmd_solve_dtft(opt);
        if (command == "verify-bounds") return cmd_verify_bounds(opt);
        if (command == "train") return cmd_train(opt);
        if (command == "recover") return cmd_recover(opt);
        std::cerr << "error: unknown command '" << command << "'\n";
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NonConvergence& e) {
        std::cerr << "not converged: " << e.what() << "\n";
        return kExitNonConvergence;
    } catch (const AnalysisFailure& e) {
        std::cerr << "not converged: " << e.what() << "\n";
        return kExitNonConvergence;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

}  // namespace spf::cli
