#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "error.hpp"

namespace camm::stats {

inline double mean(std::span<const double> x) {
    if (x.empty()) throw InputError("mean of empty sample");
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Population (1/N) standard deviation.
inline double sd(std::span<const double> x) {
    const double m = mean(x);
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(x.size()));
}

inline double variance(std::span<const double> x) {
    const double s = sd(x);
    return s * s;
}

/// Moment skewness m3 / m2^(3/2).
inline double skewness(std::span<const double> x) {
    const double m = mean(x);
    double m2 = 0.0, m3 = 0.0;
    for (double v : x) {
        const double d = v - m;
        m2 += d * d;
        m3 += d * d * d;
    }
    const double n = static_cast<double>(x.size());
    m2 /= n;
    m3 /= n;
    return m3 / std::pow(m2, 1.5);
}

/// Excess kurtosis m4 / m2^2 - 3.
inline double excess_kurtosis(std::span<const double> x) {
    const double m = mean(x);
    double m2 = 0.0, m4 = 0.0;
    for (double v : x) {
        const double d2 = (v - m) * (v - m);
        m2 += d2;
        m4 += d2 * d2;
    }
    const double n = static_cast<double>(x.size());
    m2 /= n;
    m4 /= n;
    return m4 / (m2 * m2) - 3.0;
}

/// Linear-interpolation quantile (type 7), p in [0, 1].
inline double quantile(std::vector<double> x, double p) {
    if (x.empty()) throw InputError("quantile of empty sample");
    std::sort(x.begin(), x.end());
    const double h = p * static_cast<double>(x.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

inline double median(std::span<const double> x) {
    return quantile(std::vector<double>(x.begin(), x.end()), 0.5);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Two-sided p-value under the standard normal reference.
inline double two_sided_p(double t) { return 2.0 * normal_cdf(-std::abs(t)); }

/// Equal-width histogram counts over [min, max] of the sample.
inline std::vector<std::size_t> histogram(std::span<const double> x, std::size_t bins,
                                          double* lo_out = nullptr, double* hi_out = nullptr) {
    std::vector<std::size_t> counts(bins, 0);
    if (x.empty() || bins == 0) return counts;
    const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
    const double lo = *mn, hi = *mx;
    if (lo_out) *lo_out = lo;
    if (hi_out) *hi_out = hi;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (double v : x) {
        std::size_t b = width > 0.0 ? static_cast<std::size_t>((v - lo) / width) : 0;
        counts[std::min(b, bins - 1)]++;
    }
    return counts;
}

/// Equal-width counts over a fixed [lo, hi]; values outside are clamped to the end bins.
inline std::vector<std::size_t> histogram_range(std::span<const double> x, std::size_t bins, double lo, double hi) {
    std::vector<std::size_t> counts(bins, 0);
    if (bins == 0) return counts;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (double v : x) {
        const double pos = width > 0.0 ? (v - lo) / width : 0.0;
        const auto b = pos <= 0.0 ? std::size_t{0} : static_cast<std::size_t>(pos);
        counts[std::min(b, bins - 1)]++;
    }
    return counts;
}

}  // namespace camm::stats
