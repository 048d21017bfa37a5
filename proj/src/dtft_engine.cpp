#include "spf/dtft_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace spf {

namespace {

std::vector<Complex> twiddles(std::size_t L, double sign) {
    std::vector<Complex> out(L);
    for (std::size_t m = 0; m < L; ++m)
        out[m] = std::polar(1.0, sign * 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(L));
    return out;
}

void check_field_shape(const DtftField& field) {
    const std::size_t bins = field.config.stored_bins();
    if (field.entries.size() != field.n_states * field.n_actions)
        throw std::invalid_argument("DtftField: entry count does not match n_states * n_actions");
    for (const auto& m : field.entries)
        if (m.rows != bins || m.cols != field.config.D)
            throw std::invalid_argument("DtftField: entry shape does not match config");
}

void check_matches(const DtftField& field, const TabularMdp& mdp, const TabularPolicy& policy) {
    check_field_shape(field);
    if (field.n_states != mdp.n_states() || field.n_actions != mdp.n_actions())
        throw std::invalid_argument("DtftField: state/action counts do not match the MDP");
    if (field.config.D != mdp.dim())
        throw std::invalid_argument("DtftField: config D = " + std::to_string(field.config.D) +
                                    " but MDP embedding dimension is " + std::to_string(mdp.dim()));
    if (field.config.gamma != mdp.gamma())
        throw std::invalid_argument("DtftField: config gamma differs from the MDP discount");
    if (policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions())
        throw std::invalid_argument("policy shape does not match the MDP");
}

}  // namespace

double DtftConfig::omega(std::size_t k) const {
    return 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(L);
}

void DtftConfig::validate() const {
    if (L < 2 || L % 2 != 0) throw std::invalid_argument("DtftConfig: L must be even and >= 2");
    if (D == 0) throw std::invalid_argument("DtftConfig: D must be >= 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("DtftConfig: gamma must lie in [0, 1)");
}

double DtftMatrix::row_norm(std::size_t k) const {
    double total = 0.0;
    for (std::size_t d = 0; d < cols; ++d) total += std::norm((*this)(k, d));
    return std::sqrt(total);
}

double DtftMatrix::max_row_norm() const {
    double best = 0.0;
    for (std::size_t k = 0; k < rows; ++k) best = std::max(best, row_norm(k));
    return best;
}

GammaDiagonal::GammaDiagonal(const DtftConfig& config) {
    config.validate();
    const auto tw = twiddles(config.L, -1.0);
    entries_.resize(config.stored_bins());
    for (std::size_t k = 0; k < entries_.size(); ++k) entries_[k] = config.gamma * tw[k];
}

DtftField DtftField::zeros(const DtftConfig& config, std::size_t n_states, std::size_t n_actions) {
    config.validate();
    DtftField field;
    field.config = config;
    field.n_states = n_states;
    field.n_actions = n_actions;
    field.entries.assign(n_states * n_actions, DtftMatrix(config.stored_bins(), config.D));
    return field;
}

double field_norm(const DtftField& field) {
    double best = 0.0;
    for (const auto& m : field.entries) best = std::max(best, m.max_row_norm());
    return best;
}

double field_distance(const DtftField& a, const DtftField& b) {
    if (a.entries.size() != b.entries.size()) throw std::invalid_argument("field_distance: shape mismatch");
    double best = 0.0;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        const auto& x = a.entries[i];
        const auto& y = b.entries[i];
        if (x.rows != y.rows || x.cols != y.cols) throw std::invalid_argument("field_distance: shape mismatch");
        for (std::size_t k = 0; k < x.rows; ++k) {
            double total = 0.0;
            for (std::size_t d = 0; d < x.cols; ++d) total += std::norm(x(k, d) - y(k, d));
            best = std::max(best, std::sqrt(total));
        }
    }
    return best;
}

SequenceDtft dtft_of_sequence(const Matrix& seq, double gamma, std::size_t L, bool half_spectrum) {
    DtftConfig cfg{L, static_cast<std::size_t>(std::max<Eigen::Index>(seq.cols(), 1)), gamma, half_spectrum};
    cfg.validate();
    const std::size_t bins = cfg.stored_bins();
    const auto D = static_cast<std::size_t>(seq.cols());
    SequenceDtft out{DtftMatrix(bins, D), 0.0};
    const auto N = static_cast<std::size_t>(seq.rows());
    if (N == 0) return out;
    const auto tw = twiddles(L, -1.0);
    double weight = 1.0;
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < bins; ++k) {
            const Complex phase = weight * tw[(k * n) % L];
            for (std::size_t d = 0; d < D; ++d)
                out.spectrum(k, d) += phase * seq(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        }
        weight *= gamma;
    }
    out.tail_bound = seq.cwiseAbs().maxCoeff() * std::pow(gamma, static_cast<double>(N)) / (1.0 - gamma);
    return out;
}

DtftField apply_bellman_dtft(const DtftField& field, const TabularMdp& mdp, const TabularPolicy& policy) {
    check_matches(field, mdp, policy);
    const std::size_t S = mdp.n_states(), A = mdp.n_actions(), D = field.config.D;
    const std::size_t bins = field.config.stored_bins();
    const GammaDiagonal gamma_diag(field.config);

    // Policy-averaged next-step field: G(s') = sum_a' pi(a'|s') F(s', a').
    std::vector<DtftMatrix> averaged(S, DtftMatrix(bins, D));
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            const double w = policy(s, a);
            if (w == 0.0) continue;
            const auto& src = field.at(s, a).values;
            auto& dst = averaged[s].values;
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
        }

    DtftField out = DtftField::zeros(field.config, S, A);
    const Matrix& emb = mdp.embedding();
    std::vector<Complex> acc(bins * D);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            std::fill(acc.begin(), acc.end(), Complex{});
            Vector expected_next = Vector::Zero(static_cast<Eigen::Index>(D));
            const auto next = mdp.next_dist(s, a);
            for (std::size_t t = 0; t < S; ++t) {
                const double p = next[t];
                if (p == 0.0) continue;
                expected_next += p * emb.row(static_cast<Eigen::Index>(t)).transpose();
                const auto& g = averaged[t].values;
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p * g[i];
            }
            auto& dst = out.at(s, a);
            for (std::size_t k = 0; k < bins; ++k)
                for (std::size_t d = 0; d < D; ++d)
                    dst(k, d) = expected_next(static_cast<Eigen::Index>(d)) + gamma_diag[k] * acc[k * D + d];
        }
    return out;
}

DtftSolveResult solve_dtft_fixed_point(const TabularMdp& mdp, const TabularPolicy& policy, const DtftConfig& config,
                                       double tol, std::size_t max_iter) {
    config.validate();
    DtftSolveResult result;
    result.field = DtftField::zeros(config, mdp.n_states(), mdp.n_actions());
    for (std::size_t it = 0; it < max_iter; ++it) {
        DtftField next = apply_bellman_dtft(result.field, mdp, policy);
        result.last_change = field_distance(next, result.field);
        result.field = std::move(next);
        result.iterations = it + 1;
        if (result.last_change <= tol) {
            result.converged = true;
            break;
        }
    }
    result.bellman_residual = field_distance(apply_bellman_dtft(result.field, mdp, policy), result.field);
    return result;
}

std::size_t a_priori_iterations(double gamma, double tol, double initial) {
    if (gamma == 0.0 || initial <= tol) return 1;
    return static_cast<std::size_t>(std::ceil(std::log(tol * (1.0 - gamma) / initial) / std::log(gamma))) + 1;
}

ContractionCheck contraction_check(const DtftField& f1, const DtftField& f2, const TabularMdp& mdp,
                                   const TabularPolicy& policy) {
    if (f1.config.L != f2.config.L || f1.config.D != f2.config.D || f1.config.gamma != f2.config.gamma ||
        f1.config.half_spectrum != f2.config.half_spectrum)
        throw std::invalid_argument("contraction_check: fields do not share a config");
    ContractionCheck out;
    out.lhs = field_distance(apply_bellman_dtft(f1, mdp, policy), apply_bellman_dtft(f2, mdp, policy));
    out.rhs = f1.config.gamma * field_distance(f1, f2);
    return out;
}

DtftMatrix expand_half_spectrum(const DtftMatrix& half, bool strict) {
    if (half.rows < 2) throw std::invalid_argument("expand_half_spectrum: need at least 2 rows (L/2 + 1 with L >= 2)");
    const std::size_t L = 2 * (half.rows - 1);
    const std::size_t D = half.cols;
    DtftMatrix full(L, D);
    for (std::size_t k = 0; k < half.rows; ++k)
        for (std::size_t d = 0; d < D; ++d) full(k, d) = half(k, d);
    for (std::size_t k : {std::size_t{0}, L / 2})
        for (std::size_t d = 0; d < D; ++d) {
            if (strict && std::abs(full(k, d).imag()) > 1e-10)
                throw std::invalid_argument("expand_half_spectrum: bin " + std::to_string(k) +
                                            " is not real; the source sequence is not real-valued");
            full(k, d) = Complex(full(k, d).real(), 0.0);
        }
    for (std::size_t k = 1; k < L / 2; ++k)
        for (std::size_t d = 0; d < D; ++d) full(L - k, d) = std::conj(half(k, d));
    return full;
}

DtftMatrix halve_spectrum(const DtftMatrix& full) {
    if (full.rows < 2 || full.rows % 2 != 0) throw std::invalid_argument("halve_spectrum: row count must be even");
    DtftMatrix half(full.rows / 2 + 1, full.cols);
    std::copy(full.values.begin(), full.values.begin() + static_cast<std::ptrdiff_t>(half.values.size()),
              half.values.begin());
    return half;
}

DtftField expand_half_spectrum(const DtftField& half, bool strict) {
    if (!half.config.half_spectrum) throw std::invalid_argument("expand_half_spectrum: field is already full");
    check_field_shape(half);
    DtftField out = half;
    out.config.half_spectrum = false;
    for (auto& m : out.entries) m = expand_half_spectrum(m, strict);
    return out;
}

RecoveredState recover_state(const DtftMatrix& spectrum, std::size_t L, bool half, std::size_t k, double gamma) {
    if (k < 1) throw std::invalid_argument("recover_state: k must be >= 1");
    if (gamma == 0.0 && k > 1) throw std::invalid_argument("recover_state: gamma = 0 leaves no signal beyond k = 1");
    const DtftMatrix full = half ? expand_half_spectrum(spectrum, false) : spectrum;
    if (full.rows != L) throw std::invalid_argument("recover_state: spectrum does not have L rows");
    const std::size_t n = k - 1;
    const auto tw = twiddles(L, 1.0);
    RecoveredState out;
    out.aliased = n >= L;
    out.state = Vector::Zero(static_cast<Eigen::Index>(full.cols));
    const double scale = 1.0 / (static_cast<double>(L) * std::pow(gamma, static_cast<double>(n)));
    for (std::size_t d = 0; d < full.cols; ++d) {
        Complex total{};
        for (std::size_t m = 0; m < L; ++m) total += full(m, d) * tw[(m * n) % L];
        total *= scale;
        out.state(static_cast<Eigen::Index>(d)) = total.real();
        out.max_imag = std::max(out.max_imag, std::abs(total.imag()));
    }
    return out;
}

RecoveredState recover_state(const DtftField& field, std::size_t s, std::size_t a, std::size_t k) {
    if (s >= field.n_states || a >= field.n_actions) throw std::invalid_argument("recover_state: index out of range");
    return recover_state(field.at(s, a), field.config.L, field.config.half_spectrum, k, field.config.gamma);
}

double aliasing_bound(double gamma, std::size_t L, double max_abs_embedding) {
    return max_abs_embedding * std::pow(gamma, static_cast<double>(L)) / (1.0 - gamma);
}

}  // namespace spf
