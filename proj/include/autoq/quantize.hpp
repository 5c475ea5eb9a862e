#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "autoq/errors.hpp"

namespace autoq::quantize {

inline constexpr double kBasisFloor = 1e-12;   // keeps degenerate kernels solvable

/// A kernel quantized to `bits` levels: every weight is reconstructed as
/// sum_b basis[b] * code[b] with codes in {-1,+1} and the basis positive and
/// sorted descending.
struct QuantizedKernel {
    int bits = 1;
    std::vector<double> basis;          // [bits], descending
    std::vector<std::int8_t> codes;     // [n_weights * bits], row-major, +-1

    size_t n_weights() const { return bits > 0 ? codes.size() / static_cast<size_t>(bits) : 0; }

    double reconstruct(size_t i) const {
        double v = 0.0;
        for (int b = 0; b < bits; ++b) v += basis[static_cast<size_t>(b)] * codes[i * bits + b];
        return v;
    }
};

namespace detail {

inline void check_args(std::span<const double> weights, int bits) {
    if (weights.empty()) throw ValidationError("quantize: empty weight list");
    if (bits < 1 || bits > 8)
        throw ValidationError("quantize: bits=" + std::to_string(bits) + " outside [1,8]");
}

/// All 2^bits reconstruction values of a basis, indexed by the code pattern
/// (bit b set means code +1 for basis element b).
inline std::vector<double> pattern_sums(const std::vector<double>& basis) {
    const int bits = static_cast<int>(basis.size());
    std::vector<double> sums(static_cast<size_t>(1) << bits, 0.0);
    for (size_t p = 0; p < sums.size(); ++p) {
        double v = 0.0;
        for (int b = 0; b < bits; ++b) v += (p >> b & 1) ? basis[b] : -basis[b];
        sums[p] = v;
    }
    return sums;
}

inline void write_pattern(std::vector<std::int8_t>& codes, size_t i, int bits, size_t pattern) {
    for (int b = 0; b < bits; ++b)
        codes[i * static_cast<size_t>(bits) + static_cast<size_t>(b)] =
            (pattern >> b & 1) ? std::int8_t{1} : std::int8_t{-1};
}

/// Exact per-weight argmin over all sign patterns for a fixed basis.
inline void assign_codes(QuantizedKernel& q, std::span<const double> weights) {
    const auto sums = pattern_sums(q.basis);
    for (size_t i = 0; i < weights.size(); ++i) {
        size_t best = 0;
        double best_err = std::numeric_limits<double>::infinity();
        for (size_t p = 0; p < sums.size(); ++p) {
            const double e = std::abs(weights[i] - sums[p]);
            if (e < best_err) {
                best_err = e;
                best = p;
            }
        }
        write_pattern(q.codes, i, q.bits, best);
    }
}

/// Least-squares basis for fixed codes (normal equations with a tiny ridge).
inline std::vector<double> solve_basis(const QuantizedKernel& q, std::span<const double> weights) {
    const int bits = q.bits;
    std::array<std::array<double, 8>, 8> ata{};
    std::array<double, 8> atw{};
    for (size_t i = 0; i < weights.size(); ++i) {
        for (int r = 0; r < bits; ++r) {
            const double cr = q.codes[i * bits + r];
            atw[r] += cr * weights[i];
            for (int c = r; c < bits; ++c) ata[r][c] += cr * q.codes[i * bits + c];
        }
    }
    for (int r = 0; r < bits; ++r) {
        ata[r][r] += 1e-12;
        for (int c = 0; c < r; ++c) ata[r][c] = ata[c][r];
    }
    // gaussian elimination with partial pivoting on the tiny SPD system
    std::array<std::array<double, 9>, 8> m{};
    for (int r = 0; r < bits; ++r) {
        for (int c = 0; c < bits; ++c) m[r][c] = ata[r][c];
        m[r][bits] = atw[r];
    }
    for (int col = 0; col < bits; ++col) {
        int pivot = col;
        for (int r = col + 1; r < bits; ++r)
            if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
        std::swap(m[col], m[pivot]);
        const double d = m[col][col];
        for (int r = col + 1; r < bits; ++r) {
            const double f = m[r][col] / d;
            for (int c = col; c <= bits; ++c) m[r][c] -= f * m[col][c];
        }
    }
    std::vector<double> v(static_cast<size_t>(bits));
    for (int r = bits - 1; r >= 0; --r) {
        double acc = m[r][bits];
        for (int c = r + 1; c < bits; ++c) acc -= m[r][c] * v[static_cast<size_t>(c)];
        v[static_cast<size_t>(r)] = acc / m[r][r];
    }
    return v;
}

/// Restore the invariant (positive, descending) without changing any
/// reconstruction: flip signs into the codes, then sort with its columns.
inline void canonicalize(QuantizedKernel& q) {
    const int bits = q.bits;
    const size_t n = q.n_weights();
    for (int b = 0; b < bits; ++b) {
        if (q.basis[static_cast<size_t>(b)] < 0.0) {
            q.basis[static_cast<size_t>(b)] = -q.basis[static_cast<size_t>(b)];
            for (size_t i = 0; i < n; ++i)
                q.codes[i * bits + b] = static_cast<std::int8_t>(-q.codes[i * bits + b]);
        }
    }
    std::vector<int> order(static_cast<size_t>(bits));
    for (int b = 0; b < bits; ++b) order[static_cast<size_t>(b)] = b;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return q.basis[static_cast<size_t>(a)] > q.basis[static_cast<size_t>(b)]; });
    std::vector<double> basis(static_cast<size_t>(bits));
    std::vector<std::int8_t> codes(q.codes.size());
    for (int b = 0; b < bits; ++b) {
        basis[static_cast<size_t>(b)] = std::max(q.basis[static_cast<size_t>(order[static_cast<size_t>(b)])], kBasisFloor);
        for (size_t i = 0; i < n; ++i)
            codes[i * bits + b] = q.codes[i * bits + order[static_cast<size_t>(b)]];
    }
    q.basis = std::move(basis);
    q.codes = std::move(codes);
}

} // namespace detail

inline std::vector<double> dequantize(const QuantizedKernel& q) {
    std::vector<double> out(q.n_weights());
    for (size_t i = 0; i < out.size(); ++i) out[i] = q.reconstruct(i);
    return out;
}

inline double quantization_mse(std::span<const double> weights, const QuantizedKernel& q) {
    if (weights.size() != q.n_weights())
        throw ValidationError("quantization_mse: weight count mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < weights.size(); ++i) {
        const double d = weights[i] - q.reconstruct(i);
        acc += d * d;
    }
    return acc / static_cast<double>(weights.size());
}

/// Symmetric uniform quantizer: basis[b] = s * 2^(bits-1-b) with
/// s = max|w| / (2^bits - 1). The representable levels are the odd multiples
/// of s in [-max|w|, max|w|]; every weight lands within s of a level.
inline QuantizedKernel quantize_uniform(std::span<const double> weights, int bits) {
    detail::check_args(weights, bits);
    double max_abs = 0.0;
    for (double w : weights) max_abs = std::max(max_abs, std::abs(w));
    const double s = std::max(max_abs / ((1 << bits) - 1), kBasisFloor);
    QuantizedKernel q;
    q.bits = bits;
    q.basis.resize(static_cast<size_t>(bits));
    for (int b = 0; b < bits; ++b) q.basis[static_cast<size_t>(b)] = s * (1 << (bits - 1 - b));
    q.codes.resize(weights.size() * static_cast<size_t>(bits));
    detail::assign_codes(q, weights);
    return q;
}

/// Alternating code/basis least squares seeded from the uniform solution, so
/// its MSE never exceeds the uniform quantizer's. Stops after `max_iters`
/// rounds or when the relative MSE improvement drops below 1e-9.
inline QuantizedKernel quantize_learned_basis(std::span<const double> weights, int bits,
                                              int max_iters,
                                              std::vector<double>* mse_trace = nullptr) {
    detail::check_args(weights, bits);
    if (max_iters < 1) throw ValidationError("quantize_learned_basis: max_iters must be >= 1");
    QuantizedKernel q = quantize_uniform(weights, bits);
    double mse = quantization_mse(weights, q);
    if (mse_trace) mse_trace->push_back(mse);
    for (int iter = 0; iter < max_iters; ++iter) {
        q.basis = detail::solve_basis(q, weights);
        detail::canonicalize(q);
        detail::assign_codes(q, weights);
        const double next = quantization_mse(weights, q);
        if (mse_trace) mse_trace->push_back(next);
        if (mse - next < 1e-9 * std::max(mse, 1e-300)) {
            mse = std::min(mse, next);
            break;
        }
        mse = next;
    }
    return q;
}

} // namespace autoq::quantize
