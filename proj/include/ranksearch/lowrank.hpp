#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "ranksearch/errors.hpp"
#include "ranksearch/matrix.hpp"

namespace ranksearch {

// Full factorization M = u * diag(sigma) * v^T with r = min(m, n) columns,
// sigma descending, u and v orthonormal.
struct Factorization {
    Matrix u;                   // m x r
    std::vector<double> sigma;  // r, descending, non-negative
    Matrix v;                   // n x r
};

// Rank-k replacement for a weight matrix: M ~= u_trunc * v_star.
struct TruncatedPair {
    Matrix u_trunc;  // m x k
    Matrix v_star;   // k x n, already folded with the retained singular values
};

namespace detail {

// Orthogonalizes the columns of w in place with Givens rotations applied from
// the right, accumulating them into v. Columns converge to u_j * sigma_j.
inline void jacobi_orthogonalize(Matrix& w, Matrix& v) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    constexpr double kRelTol = 1e-12;  // off-diagonal mass threshold
    constexpr int kMaxSweeps = 60;

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p);
                    const double wq = w(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if (gamma == 0.0) continue;
                if (std::abs(gamma) <= kRelTol * std::sqrt(alpha * beta)) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;

                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p);
                    const double wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p);
                    const double vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if (!rotated) break;
    }
}

// Fills zero-norm columns of u with unit vectors orthogonal to all other
// columns, trying standard basis vectors in index order.
inline void complete_basis(Matrix& u, const std::vector<std::size_t>& zero_cols) {
    const std::size_t m = u.rows();
    const std::size_t r = u.cols();
    for (std::size_t col : zero_cols) {
        for (std::size_t cand = 0; cand < m; ++cand) {
            std::vector<double> vec(m, 0.0);
            vec[cand] = 1.0;
            for (std::size_t j = 0; j < r; ++j) {
                if (j == col) continue;
                double proj = 0.0;
                for (std::size_t i = 0; i < m; ++i) proj += u(i, j) * vec[i];
                for (std::size_t i = 0; i < m; ++i) vec[i] -= proj * u(i, j);
            }
            double norm = 0.0;
            for (double x : vec) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (std::size_t i = 0; i < m; ++i) u(i, col) = vec[i] / norm;
                break;
            }
        }
    }
}

}  // namespace detail

// Exact SVD of a real matrix via one-sided Jacobi. Wide inputs are handled by
// factorizing the transpose, so the rotation loop always works on the smaller
// column count. Deterministic: fixed pair order, fixed sign convention.
inline Factorization svd(const Matrix& m_in) {
    if (m_in.rows() == 0 || m_in.cols() == 0) {
        throw InvalidMatrix("svd: matrix must have at least one row and column");
    }
    for (double x : m_in.data()) {
        if (!std::isfinite(x)) throw InvalidMatrix("svd: non-finite entry");
    }

    if (m_in.cols() > m_in.rows()) {
        Factorization f = svd(transpose(m_in));
        return Factorization{std::move(f.v), std::move(f.sigma), std::move(f.u)};
    }

    const std::size_t m = m_in.rows();
    const std::size_t n = m_in.cols();  // r = min = n here

    Matrix w = m_in;
    Matrix v = Matrix::identity(n);
    detail::jacobi_orthogonalize(w, v);

    std::vector<double> norms(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
        norms[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    Factorization f;
    f.u = Matrix(m, n);
    f.v = Matrix(n, n);
    f.sigma.resize(n);
    std::vector<std::size_t> zero_cols;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        f.sigma[j] = norms[src];
        if (norms[src] == 0.0) {
            zero_cols.push_back(j);
        } else {
            for (std::size_t i = 0; i < m; ++i) f.u(i, j) = w(i, src) / norms[src];
        }
        for (std::size_t i = 0; i < n; ++i) f.v(i, j) = v(i, src);
    }
    detail::complete_basis(f.u, zero_cols);

    // Sign convention: largest-magnitude entry of each left singular vector is
    // non-negative, so repeated factorizations are bitwise identical.
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double mag = std::abs(f.u(i, j));
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        if (f.u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < m; ++i) f.u(i, j) = -f.u(i, j);
            for (std::size_t i = 0; i < n; ++i) f.v(i, j) = -f.v(i, j);
        }
    }
    return f;
}

// Smallest k whose retained fraction of the spectrum's L1 mass reaches the
// requested energy. Ties resolve to the smaller k.
inline int rank_for_energy(const std::vector<double>& sigma, double energy) {
    if (!(energy > 0.0) || energy > 1.0) {
        throw InvalidEnergy("rank_for_energy: energy must be in (0, 1]");
    }
    double total = 0.0;
    for (double s : sigma) total += s;
    if (sigma.empty() || total <= 0.0) {
        throw DegenerateSpectrum("rank_for_energy: spectrum has no mass");
    }
    double cum = 0.0;
    for (std::size_t k = 0; k < sigma.size(); ++k) {
        cum += sigma[k];
        if (cum / total >= energy) return static_cast<int>(k + 1);
    }
    return static_cast<int>(sigma.size());
}

// Keeps the top-k singular directions: u_trunc = first k columns of u,
// v_star = diag(sigma_1..k) * (first k columns of v)^T.
inline TruncatedPair truncate(const Factorization& f, int k) {
    if (k < 1 || static_cast<std::size_t>(k) > f.sigma.size()) {
        throw InvalidRank("truncate: rank out of range");
    }
    const std::size_t kk = static_cast<std::size_t>(k);
    TruncatedPair t;
    t.u_trunc = Matrix(f.u.rows(), kk);
    for (std::size_t i = 0; i < f.u.rows(); ++i)
        for (std::size_t j = 0; j < kk; ++j) t.u_trunc(i, j) = f.u(i, j);
    t.v_star = Matrix(kk, f.v.rows());
    for (std::size_t j = 0; j < kk; ++j)
        for (std::size_t i = 0; i < f.v.rows(); ++i) t.v_star(j, i) = f.sigma[j] * f.v(i, j);
    return t;
}

// Theoretical speedup of replacing an m x n multiply with rank-k factors.
inline double layer_speedup(std::size_t m, std::size_t n, std::size_t k) {
    if (m < 1 || n < 1 || k < 1 || k > std::min(m, n)) {
        throw InvalidRank("layer_speedup: rank out of range");
    }
    return (static_cast<double>(m) * static_cast<double>(n)) /
           (static_cast<double>(k) * (static_cast<double>(m) + static_cast<double>(n)));
}

}  // namespace ranksearch
