#pragma once

// Symmetric eigensolver: cyclic Jacobi rotations. Intended for the small
// operators this library meets (n ≤ 64); accuracy beats speed here because
// downstream penalties square tiny eigenvalues.

#include <algorithm>
#include <cmath>
#include <vector>

#include "common.hpp"

namespace frameflow {

namespace detail {

inline double off_diagonal_norm(int n, const double* a) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(s);
}

} // namespace detail

// Diagonalizes the symmetric matrix `a` (row-major n×n, destroyed in place).
// On return `eigvals` holds ascending eigenvalues and `eigvecs` (if non-null)
// the matching orthonormal eigenvectors as columns. Sweeps stop once the
// off-diagonal norm falls below 1e-12 times the Frobenius norm of the input.
inline void sym_eigen_jacobi(int n, double* a, double* eigvals, double* eigvecs, int max_sweeps = 100) {
    require(n >= 1, "sym_eigen_jacobi: empty matrix");

    std::vector<double> vbuf;
    double* v = eigvecs;
    if (v == nullptr) {
        vbuf.assign(static_cast<size_t>(n) * n, 0.0);
        v = vbuf.data();
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) v[i * n + j] = (i == j) ? 1.0 : 0.0;

    double norm_a = 0.0;
    for (int i = 0; i < n * n; ++i) norm_a += a[i] * a[i];
    norm_a = std::sqrt(norm_a);
    const double stop = 1e-12 * norm_a;

    int sweep = 0;
    while (detail::off_diagonal_norm(n, a) > stop && norm_a > 0.0) {
        if (++sweep > max_sweeps) throw NumericError("jacobi eigensolver did not converge in 100 sweeps");
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (apq == 0.0) continue;
                double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;

                // A <- J^T A J on rows/columns p and q.
                for (int k = 0; k < n; ++k) {
                    double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = v[k * n + p], vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort eigenpairs ascending.
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int x, int y) { return a[x * n + x] < a[y * n + y]; });

    std::vector<double> sorted_vals(n);
    std::vector<double> sorted_vecs(static_cast<size_t>(n) * n);
    for (int j = 0; j < n; ++j) {
        sorted_vals[j] = a[order[j] * n + order[j]];
        for (int i = 0; i < n; ++i) sorted_vecs[i * n + j] = v[i * n + order[j]];
    }
    std::copy(sorted_vals.begin(), sorted_vals.end(), eigvals);
    if (eigvecs != nullptr) std::copy(sorted_vecs.begin(), sorted_vecs.end(), eigvecs);
}

} // namespace frameflow
