#pragma once

#include <complex>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "spf/mdp_core.hpp"

namespace spf {

/// Entries at or below this value are treated as absent edges of the support graph.
inline constexpr double kEdgeEps = 1e-12;

/// Largest block handed to the in-repo eigensolver.
inline constexpr std::size_t kEigenMaxSize = 16;
inline constexpr int kEigenMaxIterations = 500;

/// Raised when the eigensolver does not converge within its iteration cap.
class AnalysisFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NoPeriodDetected : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Canonical block form of a chain: closed irreducible classes first, then
/// transient states. Classes are ordered by their smallest state index and
/// each class lists its states in increasing order.
struct CanonicalDecomposition {
    std::vector<std::vector<std::size_t>> recurrent_classes;
    std::vector<std::size_t> transient_states;
    /// permutation[i] = original index of the state placed at position i.
    std::vector<std::size_t> permutation;
};

struct PeriodReport {
    std::vector<std::size_t> class_periods;
    std::size_t global_period = 1;
    std::optional<std::vector<std::size_t>> eigen_counts;
    std::optional<std::size_t> empirical_period;
};

/// Throws std::invalid_argument unless every row is a probability vector (1e-12).
void check_stochastic(const Matrix& chain);

CanonicalDecomposition decompose(const Matrix& chain);

/// Graph period of a closed irreducible class: gcd of level[u] + 1 - level[v]
/// over all class edges u -> v, with levels from a BFS rooted at the
/// smallest state of the class.
std::size_t class_period(const Matrix& chain, std::span<const std::size_t> cls);

/// Eigenvalues of a real square matrix (n <= 16): Householder reduction to
/// Hessenberg form, then Francis double-shift QR. Throws AnalysisFailure when
/// the iteration cap is hit.
std::vector<std::complex<double>> eigenvalues(const Matrix& block);

/// Number of eigenvalues with modulus >= 1 - tol.
std::size_t modulus_one_eigencount(const Matrix& block, double tol = 1e-8);

PeriodReport asymptotic_period(const Matrix& chain, const CanonicalDecomposition& decomposition);

/// Returns mu, P^T mu, ..., (P^T)^n mu (row convention, so these are the state
/// distributions at times 0..n).
std::vector<Vector> distribution_evolution(const Matrix& chain, const Vector& mu0, std::size_t n_steps);

/// Smallest p <= len/2 with ||v[t+p] - v[t]||_inf <= tol for every t in the tail.
std::size_t detect_empirical_period(std::span<const Vector> tail, double tol);

/// Restriction of `chain` to the states of `cls`, in the listed order.
Matrix submatrix(const Matrix& chain, std::span<const std::size_t> cls);

}  // namespace spf
