#pragma once
// Dense double-precision linear algebra, seeded randomness, activations,
// softmax losses and an Adam optimizer. Everything the editor and base model
// need, with no dependency beyond the standard library.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mend/errors.hpp"

namespace mend {

using ClassIndex = std::size_t;

class Vector {
public:
    Vector() = default;
    explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
    Vector(std::initializer_list<double> values) : data_(values) {}
    explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

    [[nodiscard]] std::size_t dim() const noexcept { return data_.size(); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    [[nodiscard]] std::span<double> values() noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    bool operator==(const Vector&) const = default;

private:
    std::vector<double> data_;
};

// Row-major dense matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
        : rows_(rows), cols_(cols), data_(std::move(values)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                             " != rows*cols " + std::to_string(rows_ * cols_));
        }
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    [[nodiscard]] std::span<double> values() noexcept { return data_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
    [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_string(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// ---------------------------------------------------------------------------
// Finiteness

inline bool all_finite(std::span<const double> xs) noexcept {
    return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

inline void require_finite(std::span<const double> xs, const char* what) {
    if (!all_finite(xs)) throw NumericError(std::string(what) + ": non-finite value");
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_string(a) + " * " + shape_string(b));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

// a * x
inline Vector matvec(const Matrix& a, const Vector& x) {
    if (a.cols() != x.dim()) {
        throw ShapeError("matvec: " + shape_string(a) + " * vector[" + std::to_string(x.dim()) + "]");
    }
    Vector out(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
        out[i] = acc;
    }
    return out;
}

// a^T * x
inline Vector matvec_transposed(const Matrix& a, const Vector& x) {
    if (a.rows() != x.dim()) {
        throw ShapeError("matvec_transposed: " + shape_string(a) + "^T * vector[" +
                         std::to_string(x.dim()) + "]");
    }
    Vector out(a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        auto r = a.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j] * xi;
    }
    return out;
}

// delta * u^T, a rank-1 matrix of shape delta.dim() x u.dim().
inline Matrix outer(const Vector& delta, const Vector& u) {
    Matrix out(delta.dim(), u.dim());
    for (std::size_t i = 0; i < delta.dim(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < u.dim(); ++j) r[j] = delta[i] * u[j];
    }
    return out;
}

// target += scale * delta * u^T
inline void add_outer(Matrix& target, const Vector& delta, const Vector& u, double scale = 1.0) {
    if (target.rows() != delta.dim() || target.cols() != u.dim()) {
        throw ShapeError("add_outer: target " + shape_string(target) + " vs " +
                         std::to_string(delta.dim()) + "x" + std::to_string(u.dim()));
    }
    for (std::size_t i = 0; i < delta.dim(); ++i) {
        const double di = scale * delta[i];
        if (di == 0.0) continue;
        auto r = target.row(i);
        for (std::size_t j = 0; j < u.dim(); ++j) r[j] += di * u[j];
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// y += scale * x
inline void axpy(double scale, std::span<const double> x, std::span<double> y) {
    if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += scale * x[i];
}

inline Vector hadamard(const Vector& a, const Vector& b) {
    if (a.dim() != b.dim()) throw ShapeError("hadamard: length mismatch");
    Vector out(a.dim());
    for (std::size_t i = 0; i < a.dim(); ++i) out[i] = a[i] * b[i];
    return out;
}

inline Vector concat(const Vector& a, const Vector& b) {
    std::vector<double> out;
    out.reserve(a.dim() + b.dim());
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return Vector(std::move(out));
}

inline Vector slice(const Vector& v, std::size_t offset, std::size_t count) {
    if (offset + count > v.dim()) throw ShapeError("slice: out of range");
    return Vector(std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(offset),
                                      v.begin() + static_cast<std::ptrdiff_t>(offset + count)));
}

inline double max_abs(std::span<const double> xs) noexcept {
    double m = 0.0;
    for (double x : xs) m = std::max(m, std::abs(x));
    return m;
}

inline double l2_norm(std::span<const double> xs) noexcept {
    double acc = 0.0;
    for (double x : xs) acc += x * x;
    return std::sqrt(acc);
}

// ||a - b|| / max(||a||, ||b||); 0 when both are 0.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
    const double scale = std::max(l2_norm(a), l2_norm(b));
    if (scale == 0.0) return 0.0;
    return std::sqrt(diff) / scale;
}

// ---------------------------------------------------------------------------
// Random numbers
//
// xoshiro256** seeded through splitmix64. The standard <random> distributions
// are implementation-defined, so uniform/normal draws are derived here from
// raw 64-bit outputs to keep sequences identical across standard libraries.

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
    }

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = std::rotl(state_[3], 45);
        return result;
    }

    // Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Uniform on {0, ..., n-1}; rejection sampling removes modulo bias.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw ConfigError("uniform_index: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return static_cast<std::size_t>(x % bound);
    }

    // Standard normal via Box-Muller (one value per call).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Independent child stream; same (seed, stream) always yields the same child.
    [[nodiscard]] Rng fork(std::uint64_t stream) const noexcept {
        std::uint64_t s = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
        return Rng(splitmix64(s));
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& s) noexcept {
        std::uint64_t z = (s += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t state_[4]{};
};

// Entries i.i.d. uniform on [-a, a], a = sqrt(6 / (rows + cols)).
inline Matrix xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
    if (rows == 0 || cols == 0) throw ConfigError("xavier_uniform: rows and cols must be >= 1");
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Matrix out(rows, cols);
    for (double& x : out.values()) x = rng.uniform(-bound, bound);
    return out;
}

// ---------------------------------------------------------------------------
// Activations

inline Vector relu(const Vector& x) {
    Vector out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return out;
}

// Subgradient at exactly zero is 1.
inline Vector relu_grad(const Vector& x) {
    Vector out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = x[i] >= 0.0 ? 1.0 : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// Softmax, NLL and KL

inline Vector log_softmax(const Vector& logits) {
    if (logits.empty()) throw ShapeError("log_softmax: empty logits");
    const double peak = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - peak);
    const double log_norm = peak + std::log(sum);
    Vector out(logits.dim());
    for (std::size_t i = 0; i < logits.dim(); ++i) out[i] = logits[i] - log_norm;
    return out;
}

inline Vector softmax(const Vector& logits) {
    Vector out = log_softmax(logits);
    for (double& x : out) x = std::exp(x);
    return out;
}

inline ClassIndex argmax(const Vector& v) {
    if (v.empty()) throw ShapeError("argmax: empty vector");
    return static_cast<ClassIndex>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct NllResult {
    double loss = 0.0;
    Vector grad_logits;
};

// -log softmax(logits)[label] and its gradient softmax(logits) - onehot(label).
inline NllResult softmax_nll(const Vector& logits, ClassIndex label) {
    if (label >= logits.dim()) {
        throw IndexError("softmax_nll: label " + std::to_string(label) + " out of range for " +
                         std::to_string(logits.dim()) + " classes");
    }
    const Vector logp = log_softmax(logits);
    NllResult out{-logp[label], Vector(logits.dim())};
    for (std::size_t i = 0; i < logits.dim(); ++i) out.grad_logits[i] = std::exp(logp[i]);
    out.grad_logits[label] -= 1.0;
    return out;
}

// KL(softmax(p_logits) || softmax(q_logits)), exact over all classes.
inline double kl_divergence(const Vector& p_logits, const Vector& q_logits) {
    if (p_logits.dim() != q_logits.dim()) throw ShapeError("kl_divergence: dimension mismatch");
    const Vector logp = log_softmax(p_logits);
    const Vector logq = log_softmax(q_logits);
    double kl = 0.0;
    for (std::size_t i = 0; i < logp.dim(); ++i) {
        const double diff = logp[i] - logq[i];
        if (diff != 0.0) kl += std::exp(logp[i]) * diff;
    }
    return kl;
}

// Gradient of kl_divergence(p, q) with respect to q_logits: softmax(q) - softmax(p).
inline Vector kl_grad_q(const Vector& p_logits, const Vector& q_logits) {
    if (p_logits.dim() != q_logits.dim()) throw ShapeError("kl_grad_q: dimension mismatch");
    const Vector p = softmax(p_logits);
    Vector g = softmax(q_logits);
    for (std::size_t i = 0; i < g.dim(); ++i) g[i] -= p[i];
    return g;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<double> first_moment;
    std::vector<double> second_moment;

    AdamState() = default;
    explicit AdamState(double lr) : learning_rate(lr) {}
};

// One bias-corrected Adam update. A fresh state (empty moments) is sized on
// the first call; afterwards the parameter count must not change.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
    if (params.size() != grads.size()) {
        throw ShapeError("adam_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
    }
    if (state.step == 0 && state.first_moment.empty()) {
        state.first_moment.assign(params.size(), 0.0);
        state.second_moment.assign(params.size(), 0.0);
    }
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw ShapeError("adam_step: optimizer state does not match parameter count");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(state.beta1, t);
    const double correction2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        if (g == 0.0 && m == 0.0) continue;
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Central finite differences, used as a gradient oracle in tests.

template <class F>
std::vector<double> finite_diff_grad(F&& f, std::vector<double> params, double h = 1e-5) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
    std::vector<double> grad(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + h;
        const double up = f(std::as_const(params));
        params[i] = saved - h;
        const double down = f(std::as_const(params));
        params[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace mend
