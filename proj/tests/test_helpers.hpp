#pragma once

#include <complex>
#include <numbers>
#include <vector>

#include "spf/dtft_engine.hpp"
#include "spf/mdp_core.hpp"
#include "spf/rng.hpp"

namespace spf::testing {

/// Dense random MDP with every transition row drawn from a Dirichlet(1).
inline TabularMdp dense_mdp(std::size_t S, std::size_t A, double gamma, Rng& rng, std::size_t dim = 0) {
    RandomMdpOptions o;
    o.gamma = gamma;
    o.embedding_dim = dim;
    return random_mdp(S, A, o, rng);
}

/// Deterministic cycle 0 -> 1 -> ... -> n-1 -> 0 with one action.
inline TabularMdp cycle_mdp(std::size_t n, double gamma, Matrix embedding) {
    std::vector<double> p(n * n, 0.0);
    for (std::size_t s = 0; s < n; ++s) p[s * n + (s + 1) % n] = 1.0;
    Vector mu = Vector::Zero(static_cast<Eigen::Index>(n));
    mu(0) = 1.0;
    return TabularMdp(n, 1, std::move(p), Vector::Zero(static_cast<Eigen::Index>(n)), mu, gamma,
                      std::move(embedding));
}

// Oracle: F(s, a)(w_k) = sum_n gamma^n e^{-j w_k n} E[x_{n+1} | s, a], summed
// directly from propagated state distributions until gamma^n is negligible.
inline DtftMatrix rollout_dtft(const TabularMdp& mdp, const TabularPolicy& pol, std::size_t s, std::size_t a,
                               std::size_t L) {
    const Matrix chain = induced_chain(mdp, pol);
    const auto next = mdp.next_dist(s, a);
    Vector p = Eigen::Map<const Vector>(next.data(), static_cast<Eigen::Index>(next.size()));
    DtftMatrix out(L, mdp.dim());
    double w = 1.0;
    for (std::size_t n = 0; w > 1e-18; ++n, w *= mdp.gamma()) {
        const Vector x = mdp.embedding().transpose() * p;
        for (std::size_t k = 0; k < L; ++k) {
            const auto phase = std::polar(w, -2.0 * std::numbers::pi * double(k) * double(n) / double(L));
            for (std::size_t d = 0; d < mdp.dim(); ++d) out(k, d) += phase * x(static_cast<Eigen::Index>(d));
        }
        p = chain.transpose() * p;
    }
    return out;
}

inline double max_diff(const DtftMatrix& a, const DtftMatrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
    return m;
}

// 2-cycle {0,1}, 3-cycle {2,3,4}, transient 5 feeding both.
inline Matrix block_2_3() {
    Matrix m = Matrix::Zero(6, 6);
    m(0, 1) = m(1, 0) = 1.0;
    m(2, 3) = m(3, 4) = m(4, 2) = 1.0;
    m(5, 0) = m(5, 2) = 0.5;
    return m;
}

// Random irreducible chain with a planted period: states are split into p
// levels and edges only go from level i to level i + 1 (mod p).
inline Matrix periodic_chain(std::size_t n, std::size_t p, Rng& rng) {
    std::vector<std::size_t> level(n);
    for (std::size_t s = 0; s < n; ++s) level[s] = s % p;
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t t = 0; t < n; ++t)
            if (level[t] == (level[s] + 1) % p && rng.uniform() < 0.7)
                m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(t)) = rng.uniform(0.1, 1.0);
        // A Hamiltonian cycle (p divides n) plus the short cycle 0 -> ... -> p-1 -> 0
        // make the chain irreducible with period exactly p.
        m(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>((s + 1) % n)) += 0.5;
        if (s == p - 1) m(static_cast<Eigen::Index>(s), 0) += 0.5;
        m.row(static_cast<Eigen::Index>(s)) /= m.row(static_cast<Eigen::Index>(s)).sum();
    }
    return m;
}

}  // namespace spf::testing
