#include "spf/bounds_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <complex>
#include <limits>
#include <numbers>
#include <sstream>

namespace spf {

BudgetExceeded::BudgetExceeded(double required, double budget)
    : std::invalid_argument([&] {
          std::ostringstream os;
          os << "path enumeration needs " << required << " paths, budget is " << budget;
          return os.str();
      }()),
      required_(required) {}

namespace {

struct PathWalker {
    const Matrix& m1;
    const Matrix& m2;
    std::size_t horizon;
    std::size_t n;

    double walk(std::size_t s, std::size_t t, double q1, double q2) const {
        if (q1 == 0.0) return q2;
        if (q2 == 0.0) return q1;
        if (t == horizon) return std::abs(q1 - q2);
        double total = 0.0;
        for (std::size_t next = 0; next < n; ++next) {
            const double a = q1 * m1(s, next);
            const double b = q2 * m2(s, next);
            if (a == 0.0 && b == 0.0) continue;
            total += walk(next, t + 1, a, b);
        }
        return total;
    }
};

}  // namespace

double truncated_seqdist_l1(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2,
                            std::size_t horizon) {
    const double required = std::pow(static_cast<double>(mdp.n_states()), static_cast<double>(horizon + 1));
    if (required > kPathBudget) throw BudgetExceeded(required, kPathBudget);
    const Matrix m1 = induced_chain(mdp, pi1);
    const Matrix m2 = induced_chain(mdp, pi2);
    const PathWalker walker{m1, m2, horizon, mdp.n_states()};
    double total = 0.0;
    for (std::size_t s = 0; s < mdp.n_states(); ++s) {
        const double mu = mdp.initial_dist()(static_cast<Eigen::Index>(s));
        if (mu > 0.0) total += walker.walk(s, 0, mu, mu);
    }
    return total;
}

Theorem1Result verify_theorem1(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2,
                               std::size_t horizon) {
    Theorem1Result r;
    const double g = mdp.gamma();
    r.lhs = std::abs(policy_performance(mdp, pi1) - policy_performance(mdp, pi2));
    r.l1 = truncated_seqdist_l1(mdp, pi1, pi2, horizon);
    r.tail = 2.0 * mdp.r_max() * std::pow(g, static_cast<double>(horizon + 1)) / (1.0 - g);
    r.rhs = mdp.r_max() / (1.0 - g) * r.l1 + r.tail;
    r.holds = r.lhs <= r.rhs + 1e-10;
    return r;
}

double PolynomialReward::evaluate(const Vector& s) const {
    double total = 0.0;
    for (std::size_t k = 0; k < coefficients.size(); ++k)
        total += coefficients[k].dot(s.array().pow(static_cast<double>(k)).matrix());
    return total;
}

void PolynomialReward::validate() const {
    if (coefficients.size() < 2) throw std::invalid_argument("PolynomialReward: degree must be >= 1");
    if (degree() > kMaxRewardDegree) throw std::invalid_argument("PolynomialReward: degree above cap of 4");
    const std::size_t D = dim();
    if (D == 0 || D > kMaxRewardDim) throw std::invalid_argument("PolynomialReward: dimension must be in [1, 4]");
    for (const auto& c : coefficients)
        if (static_cast<std::size_t>(c.size()) != D)
            throw std::invalid_argument("PolynomialReward: coefficient vectors differ in length");
}

Vector PolynomialReward::state_rewards(const TabularMdp& mdp, double r_max) const {
    validate();
    if (mdp.dim() != dim())
        throw std::invalid_argument("PolynomialReward: dimension does not match the MDP embedding");
    Vector out(static_cast<Eigen::Index>(mdp.n_states()));
    for (Eigen::Index s = 0; s < out.size(); ++s) {
        out(s) = evaluate(mdp.embedding().row(s).transpose());
        if (r_max > 0.0 && std::abs(out(s)) > r_max)
            throw std::invalid_argument("PolynomialReward: |R(s)| exceeds r_max at state " + std::to_string(s));
    }
    return out;
}

Matrix moment_sequence(const TabularMdp& mdp, const TabularPolicy& policy, std::size_t power, std::size_t horizon) {
    if (power > kMaxRewardDegree) throw std::invalid_argument("moment_sequence: power above cap of 4");
    const Matrix chain = induced_chain(mdp, policy);
    const Matrix powered = mdp.embedding().array().pow(static_cast<double>(power)).matrix();
    Matrix out(static_cast<Eigen::Index>(horizon), powered.cols());
    Vector p = mdp.initial_dist();
    for (std::size_t t = 0; t < horizon; ++t) {
        out.row(static_cast<Eigen::Index>(t)) = p.transpose() * powered;
        p = chain.transpose() * p;
    }
    return out;
}

DecayFit fit_decay(const Matrix& diff, double noise_floor) {
    DecayFit fit;
    const Eigen::Index N = diff.rows();
    if (N == 0) {
        fit.certified = true;
        return fit;
    }
    Vector env = diff.cwiseAbs().rowwise().maxCoeff();
    // Entries below the floor are rounding residue and carry no decay information.
    const double floor = noise_floor > 0.0
                             ? noise_floor
                             : 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, env.maxCoeff());
    Eigen::Index last = -1;
    for (Eigen::Index t = 0; t < N; ++t)
        if (env(t) > floor) last = t;
    if (last < 0) {
        fit.certified = true;
        return fit;
    }
    const Eigen::Index first = last / 2;
    std::vector<double> ts, logs;
    for (Eigen::Index t = first; t <= last; ++t)
        if (env(t) > floor) {
            ts.push_back(static_cast<double>(t));
            logs.push_back(std::log(env(t)));
        }
    if (ts.size() < 4) {
        // Too few points to fit a rate; the sequence vanished early.
        if (last + 8 < N) {
            fit.certified = true;
            fit.rho = 0.0;
            fit.tail_sum = 0.0;
        }
        return fit;
    }
    const double n = static_cast<double>(ts.size());
    double mt = 0.0, ml = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        mt += ts[i];
        ml += logs[i];
    }
    mt /= n;
    ml /= n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        sxy += (ts[i] - mt) * (logs[i] - ml);
        sxx += (ts[i] - mt) * (ts[i] - mt);
    }
    fit.rho = std::exp(sxy / sxx);
    if (!(fit.rho < 1.0 - 1e-9)) return fit;
    for (Eigen::Index t = first; t < N; ++t)
        fit.c = std::max(fit.c, std::max(env(t), floor) / std::pow(fit.rho, static_cast<double>(t)));
    fit.tail_sum = fit.c * std::pow(fit.rho, static_cast<double>(N)) / (1.0 - fit.rho);
    fit.certified = std::isfinite(fit.tail_sum);
    return fit;
}

Theorem3Result verify_theorem3(const TabularMdp& mdp, const TabularPolicy& pi1, const TabularPolicy& pi2,
                               const PolynomialReward& reward, std::size_t horizon, std::size_t dft_size,
                               double tolerance) {
    if (horizon == 0) throw std::invalid_argument("verify_theorem3: horizon must be >= 1");
    if (dft_size < 2) throw std::invalid_argument("verify_theorem3: dft_size must be >= 2");
    const Vector rewards = reward.state_rewards(mdp);
    const TabularMdp poly_mdp = mdp.with_reward(rewards);
    Theorem3Result out;
    out.lhs = std::abs(policy_performance(poly_mdp, pi1) - policy_performance(poly_mdp, pi2));

    const std::size_t D = reward.dim();
    const std::size_t M = dft_size;
    const double dw = 2.0 * std::numbers::pi / static_cast<double>(M);
    std::vector<std::complex<double>> tw(M);
    for (std::size_t m = 0; m < M; ++m) tw[m] = std::polar(1.0, -dw * static_cast<double>(m));

    double upper = 0.0, lower = 0.0;
    out.decay_certified = true;
    for (std::size_t k = 1; k <= reward.degree(); ++k) {
        Theorem3Term term;
        term.power = k;
        term.coef_norm = reward.coefficients[k].norm();
        const Matrix m1 = moment_sequence(mdp, pi1, k, horizon);
        const Matrix m2 = moment_sequence(mdp, pi2, k, horizon);
        const Matrix diff = m1 - m2;
        // Both sequences accumulate rounding error roughly linearly in t.
        const double scale = std::max({1.0, m1.cwiseAbs().maxCoeff(), m2.cwiseAbs().maxCoeff()});
        term.decay = fit_decay(diff, 16.0 * std::numeric_limits<double>::epsilon() *
                                         static_cast<double>(horizon) * scale);
        term.tail = term.decay.tail_sum;
        if (term.coef_norm > 0.0 && !term.decay.certified) out.decay_certified = false;

        double sup_upper = 0.0, sup_lower = 0.0;
        for (std::size_t i = 0; i < D; ++i) {
            const auto col = diff.col(static_cast<Eigen::Index>(i));
            double best = 0.0;
            // Real input: bins above M/2 mirror the lower half.
            for (std::size_t m = 0; m <= M / 2; ++m) {
                std::complex<double> acc{};
                for (std::size_t t = 0; t < horizon; ++t) acc += col(static_cast<Eigen::Index>(t)) * tw[(m * t) % M];
                best = std::max(best, std::abs(acc));
            }
            const double slack = static_cast<double>(horizon) * dw * col.cwiseAbs().sum();
            term.grid_max = std::max(term.grid_max, best);
            term.grid_slack = std::max(term.grid_slack, slack);
            sup_upper = std::max(sup_upper, best + slack + term.tail);
            sup_lower = std::max(sup_lower, std::max(best - term.tail, 0.0));
        }
        upper += term.coef_norm * sup_upper;
        lower += term.coef_norm * sup_lower;
        out.terms.push_back(term);
    }
    const double scale = std::sqrt(static_cast<double>(D)) / (1.0 - mdp.gamma());
    out.rhs = scale * upper;
    out.rhs_lower = scale * lower;
    out.holds = out.lhs <= out.rhs + tolerance;
    out.verdict = !out.decay_certified ? "inapplicable" : (out.holds ? "holds" : "violated");
    return out;
}

BoundsInstance theorem1_instance(std::size_t n_states, std::size_t n_actions, double gamma, Rng& rng) {
    RandomMdpOptions o;
    o.gamma = gamma;
    TabularMdp mdp = random_mdp(n_states, n_actions, o, rng);
    TabularPolicy pi1 = random_policy(n_states, n_actions, rng);
    TabularPolicy pi2 = random_policy(n_states, n_actions, rng);
    return {"theorem1", std::move(mdp), std::move(pi1), std::move(pi2), {}};
}

BoundsInstance theorem3_instance(std::size_t n_states, std::size_t n_actions, std::size_t dim, std::size_t degree,
                                 double gamma, Rng& rng) {
    if (n_states < 2 || n_actions < 1 || dim < 1)
        throw std::invalid_argument("theorem3_instance: need n_states >= 2, n_actions >= 1, dim >= 1");
    const std::size_t S = n_states, A = n_actions;
    // Each action kernel is a random mixture of permutations plus a uniform
    // component: doubly stochastic and primitive, so uniform is stationary.
    std::vector<double> p(S * A * S, 0.0);
    std::vector<std::size_t> perm(S);
    for (std::size_t a = 0; a < A; ++a) {
        const double w_uniform = rng.uniform(0.05, 0.3);
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t t = 0; t < S; ++t) p[(s * A + a) * S + t] = w_uniform / static_cast<double>(S);
        const std::size_t n_perm = 3;
        std::vector<double> w(n_perm);
        double total = 0.0;
        for (auto& x : w) total += (x = rng.uniform(0.1, 1.0));
        for (std::size_t j = 0; j < n_perm; ++j) {
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            for (std::size_t i = S - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
            for (std::size_t s = 0; s < S; ++s) p[(s * A + a) * S + perm[s]] += (1.0 - w_uniform) * w[j] / total;
        }
    }
    Matrix emb(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb(i) = rng.normal();
    Vector mu = Vector::Zero(static_cast<Eigen::Index>(S));
    mu(static_cast<Eigen::Index>(rng.index(S))) = 1.0;
    TabularMdp mdp(S, A, std::move(p), Vector::Zero(static_cast<Eigen::Index>(S)), mu, gamma, emb);
    // State-independent action distributions keep the induced chain a mixture
    // of doubly stochastic kernels.
    auto shared_policy = [&]() {
        Vector row(static_cast<Eigen::Index>(A));
        for (Eigen::Index a = 0; a < row.size(); ++a) row(a) = rng.uniform(0.05, 1.0);
        row /= row.sum();
        Matrix probs(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(A));
        probs.rowwise() = row.transpose();
        return TabularPolicy(probs);
    };
    TabularPolicy pi1 = shared_policy();
    TabularPolicy pi2 = shared_policy();
    PolynomialReward reward;
    for (std::size_t k = 0; k <= degree; ++k) {
        Vector c(static_cast<Eigen::Index>(dim));
        for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = rng.uniform(-1.0, 1.0);
        reward.coefficients.push_back(c);
    }
    reward.validate();
    return {"theorem3", std::move(mdp), std::move(pi1), std::move(pi2), std::move(reward)};
}

BoundsInstance undecaying_instance(double gamma) {
    std::vector<double> p = {0.0, 1.0, 1.0, 0.0,   // state 0: swap, stay
                             1.0, 0.0, 0.0, 1.0};  // state 1: swap, stay
    Matrix emb(2, 1);
    emb << 1.0, -1.0;
    Vector mu(2);
    mu << 1.0, 0.0;
    TabularMdp mdp(2, 2, std::move(p), Vector::Zero(2), mu, gamma, emb);
    const std::vector<std::size_t> swap = {0, 0};
    const std::vector<std::size_t> stay = {1, 1};
    PolynomialReward reward;
    Vector c0(1), c1(1);
    c0 << 0.0;
    c1 << 1.0;
    reward.coefficients = {c0, c1};
    return {"undecaying", std::move(mdp), TabularPolicy::deterministic(swap, 2), TabularPolicy::deterministic(stay, 2),
            std::move(reward)};
}

}  // namespace spf
