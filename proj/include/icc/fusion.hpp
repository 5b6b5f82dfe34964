#pragma once

// Logistic fusion of the visual- and semantic-bottleneck reconstruction scores:
//     icc = sigmoid(a * vba + b * sba + c)

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "icc/corpus.hpp"
#include "icc/error.hpp"
#include "icc/standardize.hpp"

namespace icc {

struct FusionParams {
    static constexpr int format_version = 1;

    double a = 0.0;  // vba weight
    double b = 0.0;  // sba weight
    double c = 0.0;  // bias

    bool operator==(const FusionParams&) const = default;
};

/// Weights fitted on 244 human-labelled captions, shipped as the `paper-a8` preset.
inline constexpr FusionParams kPaperA8Params{13.2, 3.6, -9.4};

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double fusion_logit(const FusionParams& p, double vba, double sba) { return p.a * vba + p.b * sba + p.c; }

inline double apply_fusion(const FusionParams& p, double vba, double sba) { return sigmoid(fusion_logit(p, vba, sba)); }

// ---------------------------------------------------------------------------
// Label binarization

struct MedianSplit {};
struct ThresholdSplit {
    double theta = 0.0;
};
using BinarizeMode = std::variant<MedianSplit, ThresholdSplit>;

/// Lower median of the values (element (n-1)/2 of the sorted list).
inline double lower_median(std::vector<double> v) {
    if (v.empty()) throw Error("median of empty set");
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

/// Label 1 iff the score lies strictly above the cut (lower median or theta).
inline std::map<std::string, int> binarize_labels(const AnnotationSet& annotations, const BinarizeMode& mode) {
    if (annotations.labels.empty()) throw Error("binarize_labels: no annotations");
    double cut = 0.0;
    if (std::holds_alternative<MedianSplit>(mode)) {
        std::vector<double> values;
        values.reserve(annotations.labels.size());
        for (const auto& [id, v] : annotations.labels) values.push_back(v);
        cut = lower_median(std::move(values));
    } else {
        cut = std::get<ThresholdSplit>(mode).theta;
    }
    std::map<std::string, int> out;
    std::size_t positives = 0;
    for (const auto& [id, v] : annotations.labels) {
        const int label = v > cut ? 1 : 0;
        positives += static_cast<std::size_t>(label);
        out.emplace(id, label);
    }
    if (positives == 0 || positives == out.size()) throw Error("binarize_labels: labels form a single class");
    return out;
}

// ---------------------------------------------------------------------------
// Fitting

struct FusionPoint {
    double vba = 0.0;
    double sba = 0.0;
    int label = 0;
};

struct FitConfig {
    std::size_t max_iters = 10000;
    double tol = 1e-8;
    double l2 = 1e-6;
};

struct FitResult {
    FusionParams params;
    std::size_t iterations = 0;
    bool converged = false;
    /// Set when max_iters was reached before convergence.
    bool hit_iteration_cap = false;
    /// Objective before the first step and after every iteration.
    std::vector<double> loss_history;
    std::size_t gradient_steps = 0;
};

namespace detail {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
inline void symmetric_eigen(Mat3 m, Vec3& values, Mat3& vectors) {
    vectors = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    for (int sweep = 0; sweep < 64; ++sweep) {
        const double off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
        if (off < 1e-300) break;
        for (int p = 0; p < 2; ++p) {
            for (int q = p + 1; q < 3; ++q) {
                if (m[p][q] == 0.0) continue;
                const double theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < 3; ++k) {
                    const double mkp = m[k][p], mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for (int k = 0; k < 3; ++k) {
                    const double mpk = m[p][k], mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for (int k = 0; k < 3; ++k) {
                    const double vkp = vectors[k][p], vkq = vectors[k][q];
                    vectors[k][p] = c * vkp - s * vkq;
                    vectors[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    values = {m[0][0], m[1][1], m[2][2]};
}

class LogisticObjective {
public:
    LogisticObjective(std::span<const FusionPoint> pts, double l2) : pts_(pts), l2_(l2) {}

    double loss(const Vec3& w) const {
        double sum = 0.0;
        for (const auto& p : pts_) {
            const double z = w[0] * p.vba + w[1] * p.sba + w[2];
            sum += softplus(z) - p.label * z;
        }
        return sum / static_cast<double>(pts_.size()) + 0.5 * l2_ * (w[0] * w[0] + w[1] * w[1]);
    }

    void derivatives(const Vec3& w, Vec3& grad, Mat3& hess) const {
        grad = {0, 0, 0};
        hess = {};
        for (const auto& p : pts_) {
            const Vec3 x{p.vba, p.sba, 1.0};
            const double s = sigmoid(w[0] * x[0] + w[1] * x[1] + w[2]);
            const double r = s - p.label;
            const double h = s * (1.0 - s);
            for (int i = 0; i < 3; ++i) {
                grad[i] += r * x[i];
                for (int j = 0; j < 3; ++j) hess[i][j] += h * x[i] * x[j];
            }
        }
        const double inv_n = 1.0 / static_cast<double>(pts_.size());
        for (int i = 0; i < 3; ++i) {
            grad[i] *= inv_n;
            for (int j = 0; j < 3; ++j) hess[i][j] *= inv_n;
        }
        grad[0] += l2_ * w[0];
        grad[1] += l2_ * w[1];
        hess[0][0] += l2_;
        hess[1][1] += l2_;
    }

private:
    std::span<const FusionPoint> pts_;
    double l2_;
};

} // namespace detail

/// Minimizes mean logistic loss + (l2/2)(a^2 + b^2) with damped Newton steps,
/// falling back to gradient descent when the Hessian condition number exceeds 1e12.
/// Every accepted step satisfies an Armijo decrease, so the loss never increases.
inline FitResult fit_fusion(std::span<const FusionPoint> points, const FitConfig& config = {}) {
    using detail::Mat3;
    using detail::Vec3;

    if (config.max_iters < 1) throw Error("fit_fusion: max_iters must be at least 1");
    if (!(config.tol > 0.0)) throw Error("fit_fusion: tol must be positive");
    if (!(config.l2 >= 0.0)) throw Error("fit_fusion: l2 must be non-negative");
    if (points.empty()) throw Error("fit_fusion: no points");
    std::size_t positives = 0;
    for (const auto& p : points) {
        if (!std::isfinite(p.vba) || !std::isfinite(p.sba)) throw Error("fit_fusion: non-finite score");
        if (p.label != 0 && p.label != 1) throw Error("fit_fusion: labels must be 0 or 1");
        positives += static_cast<std::size_t>(p.label);
    }
    if (positives == 0 || positives == points.size()) throw Error("fit_fusion: input has a single class");

    constexpr double kMaxCondition = 1e12;
    constexpr double kArmijo = 1e-4;

    const detail::LogisticObjective objective(points, config.l2);
    Vec3 w{0, 0, 0};
    double loss = objective.loss(w);

    FitResult result;
    result.loss_history.push_back(loss);

    for (std::size_t iter = 1; iter <= config.max_iters; ++iter) {
        result.iterations = iter;
        Vec3 g;
        Mat3 h;
        objective.derivatives(w, g, h);

        Vec3 eig;
        Mat3 vecs;
        detail::symmetric_eigen(h, eig, vecs);
        const double lo = *std::min_element(eig.begin(), eig.end());
        const double hi = *std::max_element(eig.begin(), eig.end());

        Vec3 dir{-g[0], -g[1], -g[2]};
        if (lo > 0.0 && hi / lo <= kMaxCondition) {
            // Newton direction -H^-1 g through the eigenbasis.
            Vec3 proj{0, 0, 0};
            for (int k = 0; k < 3; ++k) {
                for (int i = 0; i < 3; ++i) proj[k] += vecs[i][k] * g[i];
                proj[k] /= eig[k];
            }
            for (int i = 0; i < 3; ++i) {
                dir[i] = 0.0;
                for (int k = 0; k < 3; ++k) dir[i] -= vecs[i][k] * proj[k];
            }
        } else {
            ++result.gradient_steps;
        }

        const double slope = g[0] * dir[0] + g[1] * dir[1] + g[2] * dir[2];
        double step = 1.0;
        Vec3 next = w;
        double next_loss = loss;
        bool accepted = false;
        if (slope < 0.0) {
            for (int halving = 0; halving < 60; ++halving, step *= 0.5) {
                for (int i = 0; i < 3; ++i) next[i] = w[i] + step * dir[i];
                next_loss = objective.loss(next);
                if (std::isfinite(next_loss) && next_loss <= loss + kArmijo * step * slope) {
                    accepted = true;
                    break;
                }
            }
        }

        double change = 0.0;
        if (accepted) {
            for (int i = 0; i < 3; ++i) change = std::max(change, std::abs(next[i] - w[i]));
            w = next;
            loss = next_loss;
        }
        result.loss_history.push_back(loss);
        if (!accepted || change < config.tol) {
            result.converged = true;
            break;
        }
    }
    result.hit_iteration_cap = !result.converged;
    result.params = {w[0], w[1], w[2]};
    return result;
}

// ---------------------------------------------------------------------------
// Corpus application

/// Adds out_name = apply_fusion(params, vba, sba) to each record.
template <RecordSource S, class Sink>
ProcessStats fuse_corpus(S& source, const FusionParams& params, const std::string& vba_name,
                         const std::string& sba_name, const std::string& out_name, ReadMode mode, Sink&& sink) {
    ProcessStats st;
    while (auto r = source.next()) {
        ++st.processed;
        const auto vba = r->score(vba_name);
        const auto sba = r->score(sba_name);
        if (!vba || !sba) {
            if (mode == ReadMode::strict) throw MissingScoreError(r->id, vba ? sba_name : vba_name);
            ++st.skipped;
            continue;
        }
        r->scores[out_name] = apply_fusion(params, *vba, *sba);
        sink(std::move(*r));
        ++st.emitted;
    }
    return st;
}

// ---------------------------------------------------------------------------
// Persistence

inline ordered_json to_json(const FusionParams& p) {
    ordered_json j;
    j["a"] = p.a;
    j["b"] = p.b;
    j["c"] = p.c;
    j["format_version"] = FusionParams::format_version;
    return j;
}

inline FusionParams fusion_params_from_json(const json& j) {
    FusionParams p;
    try {
        if (j.at("format_version").get<int>() != FusionParams::format_version)
            throw FormatError("fusion params: unsupported format_version");
        p.a = j.at("a").get<double>();
        p.b = j.at("b").get<double>();
        p.c = j.at("c").get<double>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("fusion params: ") + e.what());
    }
    if (!std::isfinite(p.a) || !std::isfinite(p.b) || !std::isfinite(p.c))
        throw FormatError("fusion params: non-finite value");
    return p;
}

inline void save_fusion_params(const FusionParams& p, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(p).dump(2) << '\n';
    if (!out) throw IoError("write failure on " + path.string());
}

/// Accepts a params file path or the preset name `paper-a8`.
inline FusionParams load_fusion_params(const std::string& path_or_preset) {
    if (path_or_preset == "paper-a8") return kPaperA8Params;
    std::ifstream in(path_or_preset);
    if (!in) throw IoError("cannot open " + path_or_preset);
    try {
        return fusion_params_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw FormatError(path_or_preset + ": " + e.what());
    }
}

} // namespace icc
