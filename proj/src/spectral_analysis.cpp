#include "spf/spectral_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <queue>
#include <string>

namespace spf {

void check_stochastic(const Matrix& chain) {
    if (chain.rows() != chain.cols() || chain.rows() == 0)
        throw std::invalid_argument("chain must be a non-empty square matrix");
    for (Eigen::Index i = 0; i < chain.rows(); ++i) {
        if ((chain.row(i).array() < 0.0).any() || !chain.row(i).allFinite())
            throw std::invalid_argument("chain row " + std::to_string(i) + " has negative or non-finite entries");
        if (std::abs(chain.row(i).sum() - 1.0) > kProbTol)
            throw std::invalid_argument("chain row " + std::to_string(i) + " does not sum to 1");
    }
}

namespace {

bool edge(const Matrix& chain, std::size_t from, std::size_t to) {
    return chain(static_cast<Eigen::Index>(from), static_cast<Eigen::Index>(to)) > kEdgeEps;
}

// Tarjan's strongly connected components; component ids are assigned in reverse topological order.
std::vector<int> scc_ids(const Matrix& chain, int& n_components) {
    const auto n = static_cast<std::size_t>(chain.rows());
    std::vector<int> index(n, -1), low(n, 0), comp(n, -1);
    std::vector<bool> on_stack(n, false);
    std::vector<std::size_t> stack;
    int counter = 0;
    n_components = 0;
    std::function<void(std::size_t)> visit = [&](std::size_t v) {
        index[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
        for (std::size_t w = 0; w < n; ++w) {
            if (!edge(chain, v, w)) continue;
            if (index[w] < 0) {
                visit(w);
                low[v] = std::min(low[v], low[w]);
            } else if (on_stack[w]) {
                low[v] = std::min(low[v], index[w]);
            }
        }
        if (low[v] == index[v]) {
            while (true) {
                const std::size_t w = stack.back();
                stack.pop_back();
                on_stack[w] = false;
                comp[w] = n_components;
                if (w == v) break;
            }
            ++n_components;
        }
    };
    for (std::size_t v = 0; v < n; ++v)
        if (index[v] < 0) visit(v);
    return comp;
}

}  // namespace

CanonicalDecomposition decompose(const Matrix& chain) {
    check_stochastic(chain);
    const auto n = static_cast<std::size_t>(chain.rows());
    int n_comp = 0;
    const std::vector<int> comp = scc_ids(chain, n_comp);
    std::vector<bool> closed(static_cast<std::size_t>(n_comp), true);
    for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v)
            if (edge(chain, u, v) && comp[u] != comp[v]) closed[static_cast<std::size_t>(comp[u])] = false;

    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_comp));
    for (std::size_t v = 0; v < n; ++v) members[static_cast<std::size_t>(comp[v])].push_back(v);

    CanonicalDecomposition out;
    for (int c = 0; c < n_comp; ++c) {
        auto& m = members[static_cast<std::size_t>(c)];
        if (closed[static_cast<std::size_t>(c)])
            out.recurrent_classes.push_back(m);
        else
            out.transient_states.insert(out.transient_states.end(), m.begin(), m.end());
    }
    std::sort(out.recurrent_classes.begin(), out.recurrent_classes.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    std::sort(out.transient_states.begin(), out.transient_states.end());
    for (const auto& cls : out.recurrent_classes)
        out.permutation.insert(out.permutation.end(), cls.begin(), cls.end());
    out.permutation.insert(out.permutation.end(), out.transient_states.begin(), out.transient_states.end());
    return out;
}

std::size_t class_period(const Matrix& chain, std::span<const std::size_t> cls) {
    if (cls.empty()) throw std::invalid_argument("class_period: empty class");
    const auto n = static_cast<std::size_t>(chain.rows());
    std::vector<bool> member(n, false);
    for (std::size_t s : cls) {
        if (s >= n) throw std::invalid_argument("class_period: state index out of range");
        member[s] = true;
    }
    for (std::size_t u : cls)
        for (std::size_t v = 0; v < n; ++v)
            if (edge(chain, u, v) && !member[v])
                throw std::invalid_argument("class_period: class is not closed (state " + std::to_string(u) +
                                            " leaks to " + std::to_string(v) + ")");

    const std::size_t anchor = *std::min_element(cls.begin(), cls.end());
    std::vector<long> level(n, -1);
    std::queue<std::size_t> frontier;
    level[anchor] = 0;
    frontier.push(anchor);
    while (!frontier.empty()) {
        const std::size_t u = frontier.front();
        frontier.pop();
        for (std::size_t v = 0; v < n; ++v)
            if (member[v] && edge(chain, u, v) && level[v] < 0) {
                level[v] = level[u] + 1;
                frontier.push(v);
            }
    }
    for (std::size_t s : cls)
        if (level[s] < 0) throw std::invalid_argument("class_period: class is not irreducible");

    long period = 0;
    for (std::size_t u : cls)
        for (std::size_t v : cls)
            if (edge(chain, u, v)) period = std::gcd(period, std::labs(level[u] + 1 - level[v]));
    return static_cast<std::size_t>(period == 0 ? 1 : period);
}

namespace {

// Householder reduction to upper Hessenberg form, in place.
void to_hessenberg(Matrix& a) {
    const Eigen::Index n = a.rows();
    for (Eigen::Index k = 0; k < n - 2; ++k) {
        Vector x = a.block(k + 1, k, n - k - 1, 1);
        const double alpha = x.norm();
        if (alpha == 0.0) continue;
        Vector v = x;
        v(0) += (x(0) >= 0.0 ? alpha : -alpha);
        const double vnorm = v.norm();
        if (vnorm == 0.0) continue;
        v /= vnorm;
        // A <- H A H with H = I - 2 v v^T acting on rows/cols k+1..n-1.
        auto rows = a.block(k + 1, 0, n - k - 1, n);
        rows -= 2.0 * v * (v.transpose() * rows);
        auto cols = a.block(0, k + 1, n, n - k - 1);
        cols -= 2.0 * (cols * v) * v.transpose();
    }
    for (Eigen::Index i = 2; i < n; ++i)
        for (Eigen::Index j = 0; j < i - 1; ++j) a(i, j) = 0.0;
}

double sign_of(double magnitude, double sign) { return sign >= 0.0 ? std::abs(magnitude) : -std::abs(magnitude); }

}  // namespace

std::vector<std::complex<double>> eigenvalues(const Matrix& block) {
    if (block.rows() != block.cols()) throw std::invalid_argument("eigenvalues: matrix must be square");
    const auto n = static_cast<int>(block.rows());
    if (n == 0) return {};
    if (static_cast<std::size_t>(n) > kEigenMaxSize)
        throw std::invalid_argument("eigenvalues: block exceeds the " + std::to_string(kEigenMaxSize) + "x" +
                                    std::to_string(kEigenMaxSize) + " cap");
    Matrix h = block;
    to_hessenberg(h);

    // Francis double-shift QR on the Hessenberg matrix, 1-based indexing through `a`.
    auto a = [&h](int i, int j) -> double& { return h(i - 1, j - 1); };
    std::vector<double> wr(static_cast<std::size_t>(n) + 1, 0.0), wi(static_cast<std::size_t>(n) + 1, 0.0);
    double anorm = 0.0;
    for (int i = 1; i <= n; ++i)
        for (int j = std::max(i - 1, 1); j <= n; ++j) anorm += std::abs(a(i, j));

    int nn = n;
    int total_iterations = 0;
    double t = 0.0;
    double p = 0.0, q = 0.0, r = 0.0, s = 0.0, w = 0.0, x = 0.0, y = 0.0, z = 0.0;
    while (nn >= 1) {
        int its = 0;
        int l = 0;
        do {
            for (l = nn; l >= 2; --l) {
                s = std::abs(a(l - 1, l - 1)) + std::abs(a(l, l));
                if (s == 0.0) s = anorm;
                if (std::abs(a(l, l - 1)) + s == s) {
                    a(l, l - 1) = 0.0;
                    break;
                }
            }
            x = a(nn, nn);
            if (l == nn) {
                wr[static_cast<std::size_t>(nn)] = x + t;
                wi[static_cast<std::size_t>(nn)] = 0.0;
                --nn;
            } else {
                y = a(nn - 1, nn - 1);
                w = a(nn, nn - 1) * a(nn - 1, nn);
                if (l == nn - 1) {
                    p = 0.5 * (y - x);
                    q = p * p + w;
                    z = std::sqrt(std::abs(q));
                    x += t;
                    const auto i1 = static_cast<std::size_t>(nn - 1), i2 = static_cast<std::size_t>(nn);
                    if (q >= 0.0) {
                        z = p + sign_of(z, p);
                        wr[i1] = wr[i2] = x + z;
                        if (z != 0.0) wr[i2] = x - w / z;
                        wi[i1] = wi[i2] = 0.0;
                    } else {
                        wr[i1] = wr[i2] = x + p;
                        wi[i1] = -z;
                        wi[i2] = z;
                    }
                    nn -= 2;
                } else {
                    if (its == 60 || total_iterations >= kEigenMaxIterations)
                        throw AnalysisFailure("eigenvalues: QR iteration did not converge");
                    if (its == 10 || its == 20 || its == 40) {
                        // Exceptional shift.
                        t += x;
                        for (int i = 1; i <= nn; ++i) a(i, i) -= x;
                        s = std::abs(a(nn, nn - 1)) + std::abs(a(nn - 1, nn - 2));
                        y = x = 0.75 * s;
                        w = -0.4375 * s * s;
                    }
                    ++its;
                    ++total_iterations;
                    int m = nn - 2;
                    for (; m >= l; --m) {
                        z = a(m, m);
                        r = x - z;
                        s = y - z;
                        p = (r * s - w) / a(m + 1, m) + a(m, m + 1);
                        q = a(m + 1, m + 1) - z - r - s;
                        r = a(m + 2, m + 1);
                        s = std::abs(p) + std::abs(q) + std::abs(r);
                        p /= s;
                        q /= s;
                        r /= s;
                        if (m == l) break;
                        const double u = std::abs(a(m, m - 1)) * (std::abs(q) + std::abs(r));
                        const double v = std::abs(p) * (std::abs(a(m - 1, m - 1)) + std::abs(z) + std::abs(a(m + 1, m + 1)));
                        if (u + v == v) break;
                    }
                    for (int i = m + 2; i <= nn; ++i) {
                        a(i, i - 2) = 0.0;
                        if (i != m + 2) a(i, i - 3) = 0.0;
                    }
                    for (int k = m; k <= nn - 1; ++k) {
                        if (k != m) {
                            p = a(k, k - 1);
                            q = a(k + 1, k - 1);
                            r = 0.0;
                            if (k != nn - 1) r = a(k + 2, k - 1);
                            x = std::abs(p) + std::abs(q) + std::abs(r);
                            if (x != 0.0) {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        s = sign_of(std::sqrt(p * p + q * q + r * r), p);
                        if (s != 0.0) {
                            if (k == m) {
                                if (l != m) a(k, k - 1) = -a(k, k - 1);
                            } else {
                                a(k, k - 1) = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for (int j = k; j <= nn; ++j) {
                                p = a(k, j) + q * a(k + 1, j);
                                if (k != nn - 1) {
                                    p += r * a(k + 2, j);
                                    a(k + 2, j) -= p * z;
                                }
                                a(k + 1, j) -= p * y;
                                a(k, j) -= p * x;
                            }
                            const int mmin = nn < k + 3 ? nn : k + 3;
                            for (int i = l; i <= mmin; ++i) {
                                p = x * a(i, k) + y * a(i, k + 1);
                                if (k != nn - 1) {
                                    p += z * a(i, k + 2);
                                    a(i, k + 2) -= p * r;
                                }
                                a(i, k + 1) -= p * q;
                                a(i, k) -= p;
                            }
                        }
                    }
                }
            }
        } while (l < nn - 1);
    }
    std::vector<std::complex<double>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 1; i <= n; ++i) out.emplace_back(wr[static_cast<std::size_t>(i)], wi[static_cast<std::size_t>(i)]);
    return out;
}

std::size_t modulus_one_eigencount(const Matrix& block, double tol) {
    std::size_t count = 0;
    for (const auto& lambda : eigenvalues(block))
        if (std::abs(lambda) >= 1.0 - tol) ++count;
    return count;
}

Matrix submatrix(const Matrix& chain, std::span<const std::size_t> cls) {
    const auto k = static_cast<Eigen::Index>(cls.size());
    Matrix out(k, k);
    for (Eigen::Index i = 0; i < k; ++i)
        for (Eigen::Index j = 0; j < k; ++j)
            out(i, j) = chain(static_cast<Eigen::Index>(cls[static_cast<std::size_t>(i)]),
                              static_cast<Eigen::Index>(cls[static_cast<std::size_t>(j)]));
    return out;
}

PeriodReport asymptotic_period(const Matrix& chain, const CanonicalDecomposition& decomposition) {
    check_stochastic(chain);
    const auto n = static_cast<std::size_t>(chain.rows());
    if (decomposition.permutation.size() != n) throw std::invalid_argument("asymptotic_period: decomposition size mismatch");
    PeriodReport report;
    bool all_fit = true;
    for (const auto& cls : decomposition.recurrent_classes) {
        const std::size_t d = class_period(chain, cls);
        report.class_periods.push_back(d);
        report.global_period = std::lcm(report.global_period, d);
        if (cls.size() > kEigenMaxSize) all_fit = false;
    }
    if (all_fit) {
        std::vector<std::size_t> counts;
        for (const auto& cls : decomposition.recurrent_classes)
            counts.push_back(modulus_one_eigencount(submatrix(chain, cls)));
        report.eigen_counts = std::move(counts);
    }
    return report;
}

std::vector<Vector> distribution_evolution(const Matrix& chain, const Vector& mu0, std::size_t n_steps) {
    if (mu0.size() != chain.rows()) throw std::invalid_argument("distribution_evolution: size mismatch");
    std::vector<Vector> out;
    out.reserve(n_steps + 1);
    out.push_back(mu0);
    const Matrix transposed = chain.transpose();
    for (std::size_t t = 0; t < n_steps; ++t) out.push_back(transposed * out.back());
    return out;
}

std::size_t detect_empirical_period(std::span<const Vector> tail, double tol) {
    const std::size_t len = tail.size();
    for (std::size_t p = 1; p <= len / 2; ++p) {
        bool ok = true;
        for (std::size_t t = 0; t + p < len && ok; ++t)
            ok = (tail[t + p] - tail[t]).cwiseAbs().maxCoeff() <= tol;
        if (ok) return p;
    }
    throw NoPeriodDetected("no period <= " + std::to_string(len / 2) + " detected in tail of length " +
                           std::to_string(len));
}

}  // namespace spf
