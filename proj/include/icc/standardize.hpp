#pragma once

// Caption-length standardization of reconstruction similarities.
//
// Per caption length, similarities are mapped into logit space, z-scored with
// that length's statistics, and mapped back through the inverse transform after
// rescaling to the target Logit-Normal(mu, sigma).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "icc/corpus.hpp"
#include "icc/error.hpp"
#include "icc/text.hpp"

namespace icc {

enum class Transform {
    standard,      // t(p) = ln(p / (1 - p))
    paper_literal  // t(p) = ln(1 / (1 - p)), inverse 1 - e^(-v) with v clamped at 0
};

enum class LengthUnit { words, chars };

inline std::string to_string(Transform t) { return t == Transform::standard ? "standard" : "paper-literal"; }
inline std::string to_string(LengthUnit u) { return u == LengthUnit::words ? "words" : "chars"; }

inline Transform parse_transform(const std::string& s) {
    if (s == "standard") return Transform::standard;
    if (s == "paper-literal") return Transform::paper_literal;
    throw Error("unknown transform '" + s + "' (expected standard|paper-literal)");
}

inline LengthUnit parse_length_unit(const std::string& s) {
    if (s == "words") return LengthUnit::words;
    if (s == "chars") return LengthUnit::chars;
    throw Error("unknown length unit '" + s + "' (expected words|chars)");
}

inline std::size_t caption_length(std::string_view caption, LengthUnit unit) {
    return unit == LengthUnit::words ? text::count_words(caption) : text::count_scalars(text::trim(caption));
}

/// Count, mean and sum of squared deviations; mergeable across workers.
struct RunningStats {
    std::size_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        ++count;
        const double d = x - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (x - mean);
    }

    void merge(const RunningStats& o) {
        if (o.count == 0) return;
        if (count == 0) {
            *this = o;
            return;
        }
        const double n = static_cast<double>(count + o.count);
        const double d = o.mean - mean;
        mean += d * static_cast<double>(o.count) / n;
        m2 += o.m2 + d * d * static_cast<double>(count) * static_cast<double>(o.count) / n;
        count += o.count;
    }

    /// Population standard deviation.
    double stddev() const { return count == 0 ? 0.0 : std::sqrt(std::max(0.0, m2 / static_cast<double>(count))); }
};

struct LengthBucketStats {
    std::size_t length = 0;
    std::size_t count = 0;
    double mean_t = 0.0;
    double std_t = 0.0;
};

struct StandardizeConfig {
    Transform transform = Transform::standard;
    LengthUnit length_unit = LengthUnit::words;
    double clamp_eps = 1e-4;
    std::size_t min_bucket_count = 20;
    double target_mu = 0.5;
    double target_sigma = 1.0;
};

inline void validate(const StandardizeConfig& c) {
    if (!(c.clamp_eps > 0.0 && c.clamp_eps < 0.5)) throw Error("clamp_eps must lie in (0, 0.5)");
    if (c.min_bucket_count < 1) throw Error("min_bucket_count must be at least 1");
    if (!(c.target_sigma > 0.0) || !std::isfinite(c.target_mu)) throw Error("invalid target distribution");
}

struct StandardizationModel {
    static constexpr int format_version = 1;

    StandardizeConfig config;
    std::map<std::size_t, RunningStats> buckets;
    RunningStats global;

    bool fitted() const noexcept { return global.count > 0; }

    double clamp(double p) const { return std::clamp(p, config.clamp_eps, 1.0 - config.clamp_eps); }

    double forward(double p) const {
        p = clamp(p);
        if (config.transform == Transform::standard) return std::log(p / (1.0 - p));
        return -std::log1p(-p);
    }

    double inverse(double v) const {
        if (config.transform == Transform::standard) return 1.0 / (1.0 + std::exp(-v));
        if (v <= 0.0) return 0.0;
        return -std::expm1(-v);
    }

    /// Stats used for a given length: its own bucket if large enough, else pooled.
    const RunningStats& stats_for(std::size_t length) const {
        auto it = buckets.find(length);
        if (it != buckets.end() && it->second.count >= config.min_bucket_count) return it->second;
        return global;
    }

    std::vector<LengthBucketStats> bucket_table() const {
        std::vector<LengthBucketStats> out;
        out.reserve(buckets.size());
        for (const auto& [len, s] : buckets) out.push_back({len, s.count, s.mean, s.stddev()});
        return out;
    }

    LengthBucketStats global_stats() const { return {0, global.count, global.mean, global.stddev()}; }
};

/// Single-pass accumulator behind fit_standardizer; partial fits from separate
/// shards can be merged before finishing.
class StandardizerFit {
public:
    explicit StandardizerFit(StandardizeConfig config = {}) {
        validate(config);
        model_.config = config;
    }

    void add(std::size_t length, double p) {
        if (!is_unit_interval(p)) throw Error("similarity outside [0,1]");
        if (length == 0) throw Error("caption length must be positive");
        const double t = model_.forward(p);
        model_.buckets[length].add(t);
        model_.global.add(t);
    }

    void merge(const StandardizerFit& other) {
        for (const auto& [len, s] : other.model_.buckets) model_.buckets[len].merge(s);
        model_.global.merge(other.model_.global);
    }

    StandardizationModel finish() const {
        if (!model_.fitted()) throw Error("fit_standardizer: no samples");
        return model_;
    }

private:
    StandardizationModel model_;
};

struct LengthSample {
    std::size_t length = 0;
    double similarity = 0.0;
};

inline StandardizationModel fit_standardizer(std::span<const LengthSample> samples, StandardizeConfig config = {}) {
    if (samples.empty()) throw Error("fit_standardizer: no samples");
    StandardizerFit fit(config);
    for (const auto& s : samples) fit.add(s.length, s.similarity);
    return fit.finish();
}

inline double standardize_score(const StandardizationModel& model, std::size_t caption_length, double p) {
    if (!model.fitted()) throw Error("standardize_score: model is not fitted");
    if (!is_unit_interval(p)) throw Error("similarity outside [0,1]");
    const RunningStats& s = model.stats_for(caption_length);
    const double sd = s.stddev();
    const double z = sd == 0.0 ? 0.0 : (model.forward(p) - s.mean) / sd;
    return model.inverse(model.config.target_mu + model.config.target_sigma * z);
}

struct ProcessStats {
    std::size_t processed = 0;
    std::size_t emitted = 0;
    std::size_t skipped = 0;
};

inline std::string standardized_name(const std::string& score_name) { return score_name + "_std"; }

/// Adds `<score_name>_std` to each record. Records missing the score abort in
/// strict mode and are skipped (counted) in lenient mode.
template <RecordSource S, class Sink>
ProcessStats standardize_corpus(S& source, const std::string& score_name, const StandardizationModel& model,
                                ReadMode mode, Sink&& sink) {
    ProcessStats st;
    const std::string out_name = standardized_name(score_name);
    while (auto r = source.next()) {
        ++st.processed;
        const auto p = r->score(score_name);
        if (!p) {
            if (mode == ReadMode::strict) throw MissingScoreError(r->id, score_name);
            ++st.skipped;
            continue;
        }
        r->scores[out_name] = standardize_score(model, caption_length(r->caption, model.config.length_unit), *p);
        sink(std::move(*r));
        ++st.emitted;
    }
    return st;
}

// ---------------------------------------------------------------------------
// Persistence

inline ordered_json to_json(const StandardizationModel& m) {
    const auto stats_json = [](const LengthBucketStats& s) {
        ordered_json j;
        j["length"] = s.length;
        j["count"] = s.count;
        j["mean_t"] = s.mean_t;
        j["std_t"] = s.std_t;
        return j;
    };
    ordered_json j;
    j["format_version"] = StandardizationModel::format_version;
    j["transform"] = to_string(m.config.transform);
    j["length_unit"] = to_string(m.config.length_unit);
    j["target_mu"] = m.config.target_mu;
    j["target_sigma"] = m.config.target_sigma;
    j["clamp_eps"] = m.config.clamp_eps;
    j["min_bucket_count"] = m.config.min_bucket_count;
    ordered_json table = ordered_json::array();
    for (const auto& b : m.bucket_table()) table.push_back(stats_json(b));
    j["buckets"] = std::move(table);
    auto g = stats_json(m.global_stats());
    g.erase("length");
    j["global"] = std::move(g);
    return j;
}

inline StandardizationModel standardizer_from_json(const json& j) {
    const auto stats_of = [](const json& b) {
        RunningStats s;
        s.count = b.at("count").get<std::size_t>();
        s.mean = b.at("mean_t").get<double>();
        const double sd = b.at("std_t").get<double>();
        if (s.count == 0 || sd < 0.0) throw FormatError("standardizer: invalid bucket statistics");
        s.m2 = sd * sd * static_cast<double>(s.count);
        return s;
    };
    StandardizationModel m;
    try {
        if (j.at("format_version").get<int>() != StandardizationModel::format_version)
            throw FormatError("standardizer: unsupported format_version");
        m.config.transform = parse_transform(j.at("transform").get<std::string>());
        m.config.length_unit = parse_length_unit(j.value("length_unit", std::string("words")));
        m.config.target_mu = j.at("target_mu").get<double>();
        m.config.target_sigma = j.at("target_sigma").get<double>();
        m.config.clamp_eps = j.at("clamp_eps").get<double>();
        m.config.min_bucket_count = j.at("min_bucket_count").get<std::size_t>();
        validate(m.config);
        std::size_t total = 0;
        for (const auto& b : j.at("buckets")) {
            const auto len = b.at("length").get<std::size_t>();
            if (len == 0) throw FormatError("standardizer: bucket length must be positive");
            auto s = stats_of(b);
            total += s.count;
            m.buckets[len] = s;
        }
        m.global = stats_of(j.at("global"));
        if (m.global.count != total) throw FormatError("standardizer: global count differs from bucket total");
    } catch (const json::exception& e) {
        throw FormatError(std::string("standardizer: ") + e.what());
    }
    return m;
}

inline void save_standardizer(const StandardizationModel& m, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(m).dump(2) << '\n';
    if (!out) throw IoError("write failure on " + path.string());
}

inline StandardizationModel load_standardizer(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return standardizer_from_json(j);
}

} // namespace icc
