#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fairqueue/error.hpp"

namespace fairqueue {

/// Dense row-major real matrix. Just enough algebra for softmax rows,
/// covariances and the PSD square root; not a general tensor type.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) fail(ErrorKind::InvalidInput, "matrix value count does not match shape");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    Matrix transpose() const {
        Matrix t(cols, rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) fail(ErrorKind::InvalidInput, "matmul shape mismatch");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

/// Spatial map of h_map x w_map cells, row-major.
struct Grid2D {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    Grid2D() = default;
    Grid2D(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
    Grid2D(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
        if (h == 0 || w == 0) fail(ErrorKind::InvalidInput, "grid dimensions must be positive");
        if (values.size() != h * w) fail(ErrorKind::InvalidInput, "grid value count does not match shape");
    }

    double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
    std::size_t size() const { return values.size(); }

    double sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

    Grid2D& operator+=(const Grid2D& other) {
        if (other.height != height || other.width != width) fail(ErrorKind::InvalidInput, "grid shape mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
        return *this;
    }

    friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

/// Deterministic generator keyed by (seed, stream). One instance per trajectory.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream), engine_(mix(seed, stream)) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    std::uint64_t next_u64() { return engine_(); }

private:
    static std::uint64_t splitmix(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t state = seed;
        std::uint64_t a = splitmix(state);
        state ^= stream * 0xD1B54A32D192ED03ULL;
        return a ^ splitmix(state);
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline Tensor seeded_gaussian(SeededRng& rng, std::vector<std::size_t> shape) {
    if (shape.empty()) fail(ErrorKind::InvalidInput, "gaussian shape must be nonempty");
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    Tensor t{std::move(shape), std::vector<double>(n)};
    for (double& v : t.values) v = rng.normal();
    return t;
}

/// Row-wise softmax with per-row max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        auto in = logits.row(r);
        for (double v : in)
            if (!std::isfinite(v)) fail(ErrorKind::InvalidInput, "softmax logits must be finite");
        const double peak = *std::max_element(in.begin(), in.end());
        auto dst = out.row(r);
        double total = 0.0;
        for (std::size_t k = 0; k < in.size(); ++k) total += (dst[k] = std::exp(in[k] - peak));
        for (double& v : dst) v /= total;
    }
    return out;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

inline double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) fail(ErrorKind::InvalidInput, "cosine similarity dimension mismatch");
    const double nu = norm(u);
    const double nv = norm(v);
    if (!(nu > 0.0) || !(nv > 0.0)) fail(ErrorKind::DegenerateDirection, "cosine similarity of a zero-norm vector");
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

namespace detail {

// Catmull-Rom cubic convolution kernel (a = -0.5).
inline double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

struct Taps {
    std::ptrdiff_t index[4];
    double weight[4];
};

// Half-pixel-centre mapping from output to source coordinates, clamped at the borders.
inline std::vector<Taps> resize_taps(std::size_t in, std::size_t out) {
    std::vector<Taps> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const auto last = static_cast<std::ptrdiff_t>(in) - 1;
    for (std::size_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const double base = std::floor(src);
        const double frac = src - base;
        for (int k = 0; k < 4; ++k) {
            taps[o].index[k] = std::clamp(static_cast<std::ptrdiff_t>(base) + k - 1, std::ptrdiff_t{0}, last);
            taps[o].weight[k] = cubic_weight(frac - static_cast<double>(k - 1));
        }
    }
    return taps;
}

}  // namespace detail

/// Separable bicubic upscaling; constant grids stay constant.
inline Grid2D bicubic_upscale(const Grid2D& src, std::size_t out_h, std::size_t out_w) {
    if (src.height == 0 || src.width == 0) fail(ErrorKind::InvalidInput, "empty source grid");
    if (out_h < src.height || out_w < src.width)
        fail(ErrorKind::UnsupportedResize, "bicubic_upscale only supports upscaling");
    if (out_h == src.height && out_w == src.width) return src;

    const auto col_taps = detail::resize_taps(src.width, out_w);
    const auto row_taps = detail::resize_taps(src.height, out_h);

    Grid2D horizontal(src.height, out_w);
    for (std::size_t r = 0; r < src.height; ++r)
        for (std::size_t c = 0; c < out_w; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k)
                acc += col_taps[c].weight[k] * src.at(r, static_cast<std::size_t>(col_taps[c].index[k]));
            horizontal.at(r, c) = acc;
        }

    Grid2D out(out_h, out_w);
    for (std::size_t r = 0; r < out_h; ++r)
        for (int k = 0; k < 4; ++k) {
            const double w = row_taps[r].weight[k];
            const auto sr = static_cast<std::size_t>(row_taps[r].index[k]);
            for (std::size_t c = 0; c < out_w; ++c) out.at(r, c) += w * horizontal.at(sr, c);
        }
    return out;
}

struct SymmetricEigen {
    std::vector<double> values;  // ascending
    Matrix vectors;              // column i pairs with values[i]
};

/// Cyclic Jacobi eigendecomposition for small symmetric matrices.
inline SymmetricEigen symmetric_eigen(const Matrix& input, double symmetry_tol = 1e-9) {
    if (input.rows != input.cols) fail(ErrorKind::InvalidMatrix, "eigendecomposition needs a square matrix");
    const std::size_t n = input.rows;
    double scale = 0.0;
    for (double v : input.data) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(input(i, j) - input(j, i)) > symmetry_tol * std::max(1.0, scale))
                fail(ErrorKind::InvalidMatrix, "matrix is not symmetric");

    Matrix a = input;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (input(i, j) + input(j, i));
    Matrix v = Matrix::identity(n);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off <= 1e-30 * std::max(1.0, scale * scale)) break;

        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
    SymmetricEigen out{std::vector<double>(n), Matrix(n, n)};
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i] = a(order[i], order[i]);
        for (std::size_t k = 0; k < n; ++k) out.vectors(k, i) = v(k, order[i]);
    }
    return out;
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues in
/// [-1e-9 * max(1, |A|_max), 0) are clamped to zero; anything lower is rejected.
inline Matrix matrix_sqrt_psd(const Matrix& a) {
    const SymmetricEigen eig = symmetric_eigen(a);
    double scale = 1.0;
    for (double v : a.data) scale = std::max(scale, std::abs(v));
    const std::size_t n = a.rows;
    std::vector<double> roots(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (eig.values[i] < -1e-9 * scale) fail(ErrorKind::InvalidMatrix, "matrix is indefinite");
        roots[i] = std::sqrt(std::max(0.0, eig.values[i]));
    }
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += eig.vectors(i, k) * roots[k] * eig.vectors(j, k);
            out(i, j) = out(j, i) = s;
        }
    return out;
}

}  // namespace fairqueue
