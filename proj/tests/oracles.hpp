#pragma once

// Test-only reference implementations. Deliberately naive: each one follows
// the textbook definition so it can check the production code paths.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "icc/corpus.hpp"

namespace oracle {

/// Full (|a|+1) x (|b|+1) Levenshtein table.
inline std::size_t edit_distance_table(const std::u32string& a, const std::u32string& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    return d[a.size()][b.size()];
}

/// Kendall tau-b by enumerating all pairs.
inline double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
    long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        for (std::size_t j = i + 1; j < x.size(); ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0 && dy == 0) continue;
            if (dx == 0) ++ties_x;
            else if (dy == 0) ++ties_y;
            else if ((dx > 0) == (dy > 0)) ++concordant;
            else ++discordant;
        }
    }
    const double n1 = static_cast<double>(concordant + discordant + ties_x);
    const double n2 = static_cast<double>(concordant + discordant + ties_y);
    return static_cast<double>(concordant - discordant) / std::sqrt(n1 * n2);
}

/// Fractional ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double smaller = 0, equal = 0;
        for (double w : v) {
            if (w < v[i]) ++smaller;
            if (w == v[i]) ++equal;
        }
        r[i] = 1.0 + smaller + (equal - 1.0) / 2.0;
    }
    return r;
}

/// Pearson via raw sums.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    const long double cov = sxy - sx * sy / n;
    return static_cast<double>(cov / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n)));
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(ranks(x), ranks(y));
}

/// Top-k by full sort (score desc, id asc), returned in input order.
inline std::vector<icc::CaptionRecord> top_k(const std::vector<icc::CaptionRecord>& in, const std::string& score,
                                             std::size_t k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (in[i].score(score)) idx.push_back(i);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double sa = *in[a].score(score), sb = *in[b].score(score);
        return sa != sb ? sa > sb : in[a].id < in[b].id;
    });
    idx.resize(std::min(k, idx.size()));
    std::sort(idx.begin(), idx.end());
    std::vector<icc::CaptionRecord> out;
    for (auto i : idx) out.push_back(in[i]);
    return out;
}

inline std::vector<icc::CaptionRecord> threshold(const std::vector<icc::CaptionRecord>& in, const std::string& score,
                                                 double theta) {
    std::vector<icc::CaptionRecord> out;
    for (const auto& r : in)
        if (r.score(score) && *r.score(score) >= theta) out.push_back(r);
    return out;
}

inline std::vector<std::string> ids(const std::vector<icc::CaptionRecord>& rs) {
    std::vector<std::string> out;
    for (const auto& r : rs) out.push_back(r.id);
    return out;
}

} // namespace oracle

namespace testutil {

namespace fs = std::filesystem;

/// Fresh directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "icc-test-XXXXXX").string();
        path_ = ::mkdtemp(tmpl.data());
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline icc::CaptionRecord record(std::string id, std::string caption, std::map<std::string, double> scores = {}) {
    icc::CaptionRecord r;
    r.id = std::move(id);
    r.caption = std::move(caption);
    r.scores = std::move(scores);
    return r;
}

inline const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> words{"a",     "dog",   "runs",  "on",    "the",   "beach", "red",
                                                "car",   "near",  "tree",  "small", "flock", "of",    "sheep",
                                                "snow",  "hill",  "blue",  "plane", "idea",  "hope",  "maybe",
                                                "ball",  "eye",   "girl",  "field", "city",  "night", "light"};
    return words;
}

inline std::string random_caption(std::mt19937_64& rng, std::size_t words) {
    const auto& v = vocabulary();
    std::string out;
    for (std::size_t i = 0; i < words; ++i) {
        if (i) out += ' ';
        out += v[rng() % v.size()];
    }
    return out;
}

} // namespace testutil
