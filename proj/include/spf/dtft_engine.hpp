#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "spf/mdp_core.hpp"

namespace spf {

using Complex = std::complex<double>;

/// Sampling grid for the DTFT of discounted state sequences.
struct DtftConfig {
    std::size_t L = 128;   ///< number of frequency samples, even, >= 2
    std::size_t D = 1;     ///< embedding dimension
    double gamma = 0.99;
    bool half_spectrum = true;  ///< store bins 0..L/2 only

    std::size_t stored_bins() const { return half_spectrum ? L / 2 + 1 : L; }
    double omega(std::size_t k) const;
    /// Throws std::invalid_argument on an odd or too small L, D == 0, or gamma outside [0, 1).
    void validate() const;
};

/// Complex matrix, rows = frequency bins, columns = embedding dimensions.
struct DtftMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Complex> values;

    DtftMatrix() = default;
    DtftMatrix(std::size_t rows, std::size_t cols) : rows(rows), cols(cols), values(rows * cols) {}

    Complex& operator()(std::size_t k, std::size_t d) { return values[k * cols + d]; }
    const Complex& operator()(std::size_t k, std::size_t d) const { return values[k * cols + d]; }

    /// Euclidean norm of row k over the embedding dimensions.
    double row_norm(std::size_t k) const;
    /// max_k row_norm(k).
    double max_row_norm() const;
};

/// Diagonal of Gamma: entry k = gamma * exp(-j 2 pi k / L), for the stored bins.
class GammaDiagonal {
public:
    explicit GammaDiagonal(const DtftConfig& config);

    std::size_t size() const { return entries_.size(); }
    const Complex& operator[](std::size_t k) const { return entries_[k]; }
    double re(std::size_t k) const { return entries_[k].real(); }
    double im(std::size_t k) const { return entries_[k].imag(); }

private:
    std::vector<Complex> entries_;
};

/// One DtftMatrix per (state, action) pair of a tabular MDP.
struct DtftField {
    DtftConfig config;
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    std::vector<DtftMatrix> entries;  ///< index s * n_actions + a

    static DtftField zeros(const DtftConfig& config, std::size_t n_states, std::size_t n_actions);

    DtftMatrix& at(std::size_t s, std::size_t a) { return entries[s * n_actions + a]; }
    const DtftMatrix& at(std::size_t s, std::size_t a) const { return entries[s * n_actions + a]; }
};

/// ||F|| = max over (s, a) and bins of the Euclidean row norm.
double field_norm(const DtftField& field);
/// ||F1 - F2|| in the same norm; throws on shape mismatch.
double field_distance(const DtftField& a, const DtftField& b);

struct SequenceDtft {
    DtftMatrix spectrum;
    /// Bound on the contribution of the terms past the end of the sequence,
    /// max|x| * gamma^N / (1 - gamma), assuming the sequence stays bounded by max|x|.
    double tail_bound = 0.0;
};

/// bin k = sum_n gamma^n seq[n] exp(-j 2 pi k n / L); seq is N x D.
/// Returns all L bins, or bins 0..L/2 when `half_spectrum` is set.
SequenceDtft dtft_of_sequence(const Matrix& seq, double gamma, std::size_t L, bool half_spectrum = false);

/// (T F)(s, a) = S(s, a) + Gamma * sum_s' P(s'|s,a) sum_a' pi(a'|s') F(s', a'),
/// where every row of S(s, a) is E[embedding(s') | s, a]. Jacobi sweep over (s, a).
DtftField apply_bellman_dtft(const DtftField& field, const TabularMdp& mdp, const TabularPolicy& policy);

struct DtftSolveResult {
    DtftField field;
    std::size_t iterations = 0;
    bool converged = false;
    double last_change = 0.0;      ///< sup-norm change of the final sweep
    double bellman_residual = 0.0; ///< ||T F - F|| at the returned iterate
};

/// Iterates F <- T F from F = 0 until the sup-norm change is <= tol or
/// max_iter sweeps have run (then converged = false).
DtftSolveResult solve_dtft_fixed_point(const TabularMdp& mdp, const TabularPolicy& policy, const DtftConfig& config,
                                       double tol = 1e-10, std::size_t max_iter = 1'000'000);

/// Number of sweeps the contraction guarantees for a change below tol, given
/// the first-sweep magnitude `initial`: ceil(log(tol (1 - gamma) / initial) / log gamma).
std::size_t a_priori_iterations(double gamma, double tol, double initial);

struct ContractionCheck {
    double lhs = 0.0;  ///< ||T F1 - T F2||
    double rhs = 0.0;  ///< gamma ||F1 - F2||
};

ContractionCheck contraction_check(const DtftField& f1, const DtftField& f2, const TabularMdp& mdp,
                                   const TabularPolicy& policy);

/// Rebuilds all L rows from bins 0..L/2 using row L-k = conj(row k). With
/// `strict`, bins 0 and L/2 must have |imag| <= 1e-10 (real sequences);
/// otherwise their imaginary parts are dropped.
DtftMatrix expand_half_spectrum(const DtftMatrix& half, bool strict = true);
DtftMatrix halve_spectrum(const DtftMatrix& full);
DtftField expand_half_spectrum(const DtftField& half, bool strict = true);

struct RecoveredState {
    Vector state;
    double max_imag = 0.0;  ///< largest discarded imaginary residue
    bool aliased = false;   ///< k - 1 >= L: the sample grid cannot resolve this step
};

/// Expected embedding k >= 1 steps ahead: the inverse DFT at index k - 1
/// divided by gamma^(k-1). `spectrum` holds L rows, or L/2 + 1 when `half`.
RecoveredState recover_state(const DtftMatrix& spectrum, std::size_t L, bool half, std::size_t k, double gamma);
RecoveredState recover_state(const DtftField& field, std::size_t s, std::size_t a, std::size_t k);

/// Time-aliasing bound for recovery from L samples: max|x| gamma^L / (1 - gamma).
double aliasing_bound(double gamma, std::size_t L, double max_abs_embedding);

}  // namespace spf
