#pragma once

// Reconstruction-fidelity primitives and the correlation suite used to score
// concreteness methods against human labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "icc/error.hpp"
#include "icc/text.hpp"

namespace icc {

/// Levenshtein distance over unicode scalar values.
inline std::size_t edit_distance(std::u32string_view x, std::u32string_view y) {
    if (x.size() < y.size()) std::swap(x, y);
    // Single row of length |y|+1, where y is the shorter string.
    std::vector<std::size_t> row(y.size() + 1);
    std::iota(row.begin(), row.end(), std::size_t{0});
    for (std::size_t i = 1; i <= x.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= y.size(); ++j) {
            const std::size_t up = row[j];
            const std::size_t cost = x[i - 1] == y[j - 1] ? 0 : 1;
            row[j] = std::min({up + 1, row[j - 1] + 1, diag + cost});
            diag = up;
        }
    }
    return row[y.size()];
}

inline std::size_t edit_distance(std::string_view x, std::string_view y) {
    return edit_distance(text::decode_utf8(x), text::decode_utf8(y));
}

/// 1 - edit_distance / max(|x|, |y|), lengths in unicode scalar values.
inline double edit_similarity(std::string_view x, std::string_view y) {
    const auto a = text::decode_utf8(x);
    const auto b = text::decode_utf8(y);
    const std::size_t longest = std::max(a.size(), b.size());
    if (longest == 0) throw Error("edit_similarity: both strings are empty");
    return 1.0 - static_cast<double>(edit_distance(a, b)) / static_cast<double>(longest);
}

struct BestMatch {
    std::size_t index = 0;
    double similarity = 0.0;
};

/// Picks the candidate most similar to source; ties go to the lowest index.
template <class Similarity>
BestMatch best_of(std::string_view source, std::span<const std::string> candidates, Similarity&& sim) {
    if (candidates.empty()) throw Error("best_of: no candidates");
    BestMatch best{0, sim(source, std::string_view(candidates[0]))};
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        const double s = sim(source, std::string_view(candidates[i]));
        if (s > best.similarity) best = {i, s};
    }
    return best;
}

inline BestMatch best_of(std::string_view source, std::span<const std::string> candidates) {
    return best_of(source, candidates,
                   [](std::string_view a, std::string_view b) { return edit_similarity(a, b); });
}

// ---------------------------------------------------------------------------
// Correlation

struct CorrelationReport {
    double pearson = 0.0;
    double spearman = 0.0;
    double kendall = 0.0;
    std::size_t n = 0;
};

namespace detail {

inline void check_pair(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error("correlation: length mismatch");
    if (x.size() < 2) throw Error("correlation: need at least two samples");
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw Error("correlation: non-finite input");
    }
}

inline double clamp_unit(double r) { return std::clamp(r, -1.0, 1.0); }

// Ties within sorted runs contribute t(t-1)/2 pairs each.
template <class Eq>
std::int64_t tied_pairs(std::span<const std::size_t> order, Eq&& eq) {
    std::int64_t total = 0;
    std::size_t run = 1;
    for (std::size_t i = 1; i <= order.size(); ++i) {
        if (i < order.size() && eq(order[i - 1], order[i])) {
            ++run;
        } else {
            total += static_cast<std::int64_t>(run) * static_cast<std::int64_t>(run - 1) / 2;
            run = 1;
        }
    }
    return total;
}

// Sorts v[lo, hi) ascending and returns the number of strict inversions.
inline std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo,
                                std::size_t hi) {
    if (hi - lo < 2) return 0;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::int64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
    std::size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (v[j] < v[i]) {
            swaps += static_cast<std::int64_t>(mid - i);
            buf[k++] = v[j++];
        } else {
            buf[k++] = v[i++];
        }
    }
    while (i < mid) buf[k++] = v[i++];
    while (j < hi) buf[k++] = v[j++];
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
              v.begin() + static_cast<std::ptrdiff_t>(lo));
    return swaps;
}

} // namespace detail

inline double pearson(std::span<const double> x, std::span<const double> y) {
    detail::check_pair(x, y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw Error("correlation: zero variance input");
    return detail::clamp_unit(sxy / std::sqrt(sxx * syy));
}

/// 1-based ranks with ties assigned their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i + 1;
        while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
        i = j;
    }
    return ranks;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
    detail::check_pair(x, y);
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry);
}

/// Kendall tau-b in O(n log n) (Knight's merge-sort method).
inline double kendall_tau_b(std::span<const double> x, std::span<const double> y) {
    detail::check_pair(x, y);
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
    });

    const std::int64_t pairs = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - 1) / 2;
    const std::int64_t tied_x = detail::tied_pairs(order, [&](std::size_t a, std::size_t b) { return x[a] == x[b]; });
    const std::int64_t tied_xy = detail::tied_pairs(
        order, [&](std::size_t a, std::size_t b) { return x[a] == x[b] && y[a] == y[b]; });

    std::vector<double> ys(n), buf(n);
    for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
    const std::int64_t swaps = detail::merge_count(ys, buf, 0, n);

    std::vector<std::size_t> ident(n);
    std::iota(ident.begin(), ident.end(), std::size_t{0});
    const std::int64_t tied_y = detail::tied_pairs(ident, [&](std::size_t a, std::size_t b) { return ys[a] == ys[b]; });

    const std::int64_t denom_x = pairs - tied_x;
    const std::int64_t denom_y = pairs - tied_y;
    if (denom_x == 0 || denom_y == 0) throw Error("correlation: zero variance input");
    const std::int64_t numer = pairs - tied_x - tied_y + tied_xy - 2 * swaps;
    return detail::clamp_unit(static_cast<double>(numer) /
                              std::sqrt(static_cast<double>(denom_x) * static_cast<double>(denom_y)));
}

inline CorrelationReport correlate(std::span<const double> x, std::span<const double> y) {
    CorrelationReport r;
    r.pearson = pearson(x, y);
    r.spearman = spearman(x, y);
    r.kendall = kendall_tau_b(x, y);
    r.n = x.size();
    return r;
}

} // namespace icc
