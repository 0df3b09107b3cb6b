#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "foodcl/rng.hpp"

namespace foodcl {

// Row-major dense matrix of doubles. The single numeric container of the
// project; vectors are 1 x n or n x 1 matrices or plain std::vector<double>.
struct Matrix {
    int rows{0};
    int cols{0};
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {
        if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative dimension");
    }
    Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != static_cast<size_t>(r) * static_cast<size_t>(c))
            throw std::invalid_argument("Matrix: data length does not match rows*cols");
    }

    static Matrix zeros(int r, int c) { return Matrix(r, c); }

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    static Matrix filled(int r, int c, double v) {
        Matrix m(r, c);
        for (auto& x : m.data) x = v;
        return m;
    }

    static Matrix randn(int r, int c, Rng& rng, double stddev = 1.0) {
        Matrix m(r, c);
        for (auto& x : m.data) x = rng.normal(0.0, stddev);
        return m;
    }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    double* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }

    double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    std::string shape_str() const { return std::to_string(rows) + "x" + std::to_string(cols); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) {
        for (auto& x : data) x = v;
    }
};

inline void check_finite(const Matrix& m, const char* where) {
    if (!m.all_finite()) throw std::runtime_error(std::string(where) + ": non-finite value produced");
}

// c = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() + " * " + b.shape_str());
    Matrix c(a.rows, b.cols);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        double* ci = c.row(i);
        const double* ai = a.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.row(p);
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
    check_finite(c, "matmul");
    return c;
}

// c = a * b^T  (rows of b are the contraction axis)
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_nt: shape mismatch " + a.shape_str() + " * " + b.shape_str() + "^T");
    Matrix c(a.rows, b.rows);
    const int n = a.rows, k = a.cols, m = b.rows;
    for (int i = 0; i < n; ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int j = 0; j < m; ++j) {
            const double* bj = b.row(j);
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
    check_finite(c, "matmul_nt");
    return c;
}

// c = a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_tn: shape mismatch " + a.shape_str() + "^T * " + b.shape_str());
    Matrix c(a.cols, b.cols);
    const int n = a.cols, k = a.rows, m = b.cols;
    for (int p = 0; p < k; ++p) {
        const double* ap = a.row(p);
        const double* bp = b.row(p);
        for (int i = 0; i < n; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c.row(i);
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
    check_finite(c, "matmul_tn");
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Matrix c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    check_finite(c, "add");
    return c;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add_inplace: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline void axpy_inplace(Matrix& a, double alpha, const Matrix& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("axpy: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += alpha * b.data[i];
}

inline Matrix scale(const Matrix& a, double c) {
    Matrix r = a;
    for (auto& v : r.data) v *= c;
    check_finite(r, "scale");
    return r;
}

// Sum of squared entries (squared Frobenius norm).
inline double frobenius_sq(const Matrix& m) {
    if (m.empty()) throw std::invalid_argument("frobenius_sq: empty matrix");
    double s = 0.0;
    for (double v : m.data) s += v * v;
    if (!std::isfinite(s)) throw std::runtime_error("frobenius_sq: non-finite result");
    return s;
}

inline double dot(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size()) throw std::invalid_argument("dot: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double l2_norm(const std::vector<double>& u) { return std::sqrt(dot(u, u)); }

// u.v / (|u| |v|). A zero-norm input signals an upstream bug and is rejected.
inline double cosine_similarity(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size())
        throw std::invalid_argument("cosine_similarity: length mismatch " + std::to_string(u.size()) + " vs " +
                                    std::to_string(v.size()));
    if (u.empty()) throw std::invalid_argument("cosine_similarity: empty vectors");
    const double nu = l2_norm(u), nv = l2_norm(v);
    if (nu == 0.0 || nv == 0.0) throw std::invalid_argument("cosine_similarity: zero-norm vector");
    double c = dot(u, v) / (nu * nv);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

// Checksum over exact bit patterns; used for frozen-weight invariants.
inline uint64_t matrix_checksum(const Matrix& m, uint64_t h = 0xcbf29ce484222325ull) {
    h = fnv1a64(&m.rows, sizeof(m.rows), h);
    h = fnv1a64(&m.cols, sizeof(m.cols), h);
    return fnv1a64(m.data.data(), m.data.size() * sizeof(double), h);
}

}  // namespace foodcl
