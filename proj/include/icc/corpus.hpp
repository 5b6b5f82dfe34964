#pragma once

// Record model and line-delimited corpus, shard and annotation file I/O.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <glob.h>
#include <iomanip>
#include <map>
#include <optional>
#include <ranges>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "icc/error.hpp"
#include "icc/text.hpp"

namespace icc {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct CaptionRecord {
    std::string id;
    std::string caption;
    std::optional<std::string> image_ref;
    std::map<std::string, double> scores;

    std::optional<double> score(const std::string& name) const {
        auto it = scores.find(name);
        if (it == scores.end()) return std::nullopt;
        return it->second;
    }

    bool operator==(const CaptionRecord&) const = default;
};

inline bool is_unit_interval(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

/// Throws FormatError if the record violates its invariants.
inline void validate(const CaptionRecord& r) {
    if (r.id.empty()) throw FormatError("empty id");
    if (text::trim(r.caption).empty()) throw FormatError("record '" + r.id + "': empty caption");
    for (const auto& [name, v] : r.scores) {
        if (!is_unit_interval(v))
            throw FormatError("record '" + r.id + "': score '" + name + "' outside [0,1]");
    }
}

inline std::string to_line(const CaptionRecord& r) {
    ordered_json j;
    j["id"] = r.id;
    j["caption"] = r.caption;
    if (r.image_ref) j["image_ref"] = *r.image_ref;
    ordered_json scores = ordered_json::object();
    for (const auto& [name, v] : r.scores) scores[name] = v;
    j["scores"] = std::move(scores);
    try {
        return j.dump();
    } catch (const json::exception& e) {
        throw FormatError("record '" + r.id + "': cannot serialize: " + e.what());
    }
}

inline CaptionRecord parse_record(std::string_view line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw FormatError("record is not an object");

    CaptionRecord r;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& key = it.key();
        const auto& v = it.value();
        if (key == "id") {
            if (!v.is_string()) throw FormatError("'id' must be a string");
            r.id = v.get<std::string>();
        } else if (key == "caption") {
            if (!v.is_string()) throw FormatError("'caption' must be a string");
            r.caption = v.get<std::string>();
        } else if (key == "image_ref") {
            if (v.is_null()) continue;
            if (!v.is_string()) throw FormatError("'image_ref' must be a string");
            r.image_ref = v.get<std::string>();
        } else if (key == "scores") {
            if (!v.is_object()) throw FormatError("'scores' must be an object");
            for (auto s = v.begin(); s != v.end(); ++s) {
                if (!s.value().is_number()) throw FormatError("score '" + s.key() + "' is not a number");
                r.scores[s.key()] = s.value().get<double>();
            }
        } else {
            throw FormatError("unknown field '" + key + "'");
        }
    }
    if (!j.contains("id")) throw FormatError("missing 'id'");
    if (!j.contains("caption")) throw FormatError("missing 'caption'");
    validate(r);
    return r;
}

enum class ReadMode { strict, lenient };

struct ReadStats {
    std::size_t lines = 0;
    std::size_t records = 0;
    std::size_t skipped = 0;
    std::size_t duplicates = 0;
};

template <class S>
concept RecordSource = requires(S s) {
    { s.next() } -> std::same_as<std::optional<CaptionRecord>>;
};

/// Streams records from one line-delimited corpus file.
///
/// Strict mode throws on the first malformed line or repeated id. Lenient mode
/// skips malformed lines and lets repeated ids through; both are counted in stats().
class CorpusReader {
public:
    CorpusReader(const fs::path& path, ReadMode mode = ReadMode::strict)
        : path_(path), mode_(mode), in_(path, std::ios::binary) {
        if (!fs::exists(path)) throw IoError("no such file: " + path.string());
        if (!in_) throw IoError("cannot open " + path.string());
    }

    std::optional<CaptionRecord> next() {
        std::string line;
        while (std::getline(in_, line)) {
            ++stats_.lines;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (text::trim(line).empty()) continue;
            try {
                CaptionRecord r = parse_record(line);
                if (!seen_.insert(r.id).second) {
                    if (mode_ == ReadMode::strict)
                        throw FormatError("duplicate id '" + r.id + "'");
                    ++stats_.duplicates;
                }
                ++stats_.records;
                return r;
            } catch (const FormatError& e) {
                if (mode_ == ReadMode::strict)
                    throw FormatError(path_.string() + ": " + e.what(), stats_.lines);
                ++stats_.skipped;
            }
        }
        if (in_.bad()) throw IoError("read failure on " + path_.string());
        return std::nullopt;
    }

    const ReadStats& stats() const noexcept { return stats_; }
    const fs::path& path() const noexcept { return path_; }

private:
    fs::path path_;
    ReadMode mode_;
    std::ifstream in_;
    ReadStats stats_;
    std::unordered_set<std::string> seen_;
};

/// Streams several corpus files back to back. Duplicate ids are tracked per file.
class MultiReader {
public:
    MultiReader(std::vector<fs::path> paths, ReadMode mode = ReadMode::strict)
        : paths_(std::move(paths)), mode_(mode) {}

    std::optional<CaptionRecord> next() {
        while (true) {
            if (!current_) {
                if (index_ >= paths_.size()) return std::nullopt;
                current_.emplace(paths_[index_++], mode_);
            }
            if (auto r = current_->next()) return r;
            accumulate(current_->stats());
            current_.reset();
        }
    }

    ReadStats stats() const {
        ReadStats s = done_;
        if (current_) add(s, current_->stats());
        return s;
    }

private:
    static void add(ReadStats& into, const ReadStats& s) {
        into.lines += s.lines;
        into.records += s.records;
        into.skipped += s.skipped;
        into.duplicates += s.duplicates;
    }
    void accumulate(const ReadStats& s) { add(done_, s); }

    std::vector<fs::path> paths_;
    ReadMode mode_;
    std::size_t index_ = 0;
    std::optional<CorpusReader> current_;
    ReadStats done_;
};

/// Streams copies of records held in memory.
class VectorSource {
public:
    explicit VectorSource(const std::vector<CaptionRecord>& records) : records_(&records) {}

    std::optional<CaptionRecord> next() {
        if (pos_ >= records_->size()) return std::nullopt;
        return (*records_)[pos_++];
    }

private:
    const std::vector<CaptionRecord>* records_;
    std::size_t pos_ = 0;
};

struct CorpusReadResult {
    std::vector<CaptionRecord> records;
    ReadStats stats;
};

/// Reads a whole corpus into memory. In lenient mode a repeated id replaces the
/// earlier record in place (last wins).
inline CorpusReadResult read_corpus(const fs::path& path, ReadMode mode = ReadMode::strict) {
    CorpusReader reader(path, mode);
    CorpusReadResult out;
    std::unordered_map<std::string, std::size_t> index;
    while (auto r = reader.next()) {
        auto [it, fresh] = index.try_emplace(r->id, out.records.size());
        if (fresh) out.records.push_back(std::move(*r));
        else out.records[it->second] = std::move(*r);
    }
    out.stats = reader.stats();
    return out;
}

class CorpusWriter {
public:
    explicit CorpusWriter(const fs::path& path) : path_(path) {
        if (path.has_parent_path() && !fs::exists(path.parent_path()))
            throw IoError("directory does not exist: " + path.parent_path().string());
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) throw IoError("cannot write " + path.string());
    }

    void write(const CaptionRecord& r) {
        const std::string line = to_line(r);
        out_.write(line.data(), static_cast<std::streamsize>(line.size()));
        out_.put('\n');
        if (!out_) throw IoError("write failure on " + path_.string());
        ++count_;
    }

    std::size_t count() const noexcept { return count_; }

    void close() {
        out_.close();
        if (out_.fail()) throw IoError("cannot finalize " + path_.string());
    }

private:
    fs::path path_;
    std::ofstream out_;
    std::size_t count_ = 0;
};

template <std::ranges::input_range R>
    requires std::convertible_to<std::ranges::range_reference_t<R>, const CaptionRecord&>
std::size_t write_corpus(R&& records, const fs::path& path) {
    CorpusWriter w(path);
    for (const CaptionRecord& r : records) w.write(r);
    w.close();
    return w.count();
}

template <RecordSource S>
std::size_t write_corpus(S& source, const fs::path& path) {
    CorpusWriter w(path);
    while (auto r = source.next()) w.write(*r);
    w.close();
    return w.count();
}

/// Expands a glob pattern into a sorted list of files. A pattern without
/// wildcards is returned as-is so a missing file surfaces as an IoError on open.
inline std::vector<fs::path> expand_inputs(const std::string& pattern) {
    if (pattern.find_first_of("*?[") == std::string::npos) return {fs::path(pattern)};
    glob_t g{};
    const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
    std::vector<fs::path> out;
    if (rc == 0) {
        for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
    if (out.empty()) throw IoError("no files match '" + pattern + "'");
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Sharding

struct ShardManifest {
    std::vector<std::string> shard_paths;
    std::vector<std::size_t> records_per_shard;
    std::size_t total = 0;

    bool operator==(const ShardManifest&) const = default;
};

inline void validate(const ShardManifest& m) {
    if (m.shard_paths.size() != m.records_per_shard.size())
        throw FormatError("manifest: shard_paths and records_per_shard differ in length");
    std::size_t sum = 0;
    for (auto n : m.records_per_shard) sum += n;
    if (sum != m.total) throw FormatError("manifest: total does not match shard counts");
}

inline ordered_json to_json(const ShardManifest& m) {
    ordered_json j;
    j["shard_paths"] = m.shard_paths;
    j["records_per_shard"] = m.records_per_shard;
    j["total"] = m.total;
    return j;
}

inline ShardManifest manifest_from_json(const json& j) {
    ShardManifest m;
    try {
        m.shard_paths = j.at("shard_paths").get<std::vector<std::string>>();
        m.records_per_shard = j.at("records_per_shard").get<std::vector<std::size_t>>();
        m.total = j.at("total").get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest: ") + e.what());
    }
    validate(m);
    return m;
}

inline std::string shard_file_name(std::size_t index) {
    std::ostringstream os;
    os << "shard-" << std::setw(5) << std::setfill('0') << index << ".jsonl";
    return os.str();
}

/// Splits a stream into files of exactly shard_size records (the last may be
/// shorter) under out_dir, and writes out_dir/manifest.json.
template <RecordSource S>
ShardManifest shard(S& source, std::size_t shard_size, const fs::path& out_dir) {
    if (shard_size == 0) throw Error("shard_size must be at least 1");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create directory " + out_dir.string());

    ShardManifest m;
    std::optional<CorpusWriter> w;
    while (auto r = source.next()) {
        if (!w || w->count() == shard_size) {
            if (w) {
                w->close();
                m.records_per_shard.push_back(w->count());
            }
            const fs::path p = out_dir / shard_file_name(m.shard_paths.size());
            m.shard_paths.push_back(p.string());
            w.emplace(p);
        }
        w->write(*r);
        ++m.total;
    }
    if (w) {
        w->close();
        m.records_per_shard.push_back(w->count());
    }
    std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
    out << to_json(m).dump(2) << '\n';
    if (!out) throw IoError("cannot write manifest in " + out_dir.string());
    return m;
}

// ---------------------------------------------------------------------------
// Human concreteness annotations

struct AnnotationSet {
    int scale_min = 0;
    int scale_max = 0;
    std::map<std::string, double> labels;
};

inline void validate(const AnnotationSet& a) {
    if (a.scale_min >= a.scale_max) throw FormatError("annotation scale_min must be below scale_max");
    for (const auto& [id, v] : a.labels) {
        if (!std::isfinite(v) || v < a.scale_min || v > a.scale_max)
            throw FormatError("annotation '" + id + "' outside scale [" + std::to_string(a.scale_min) +
                              "," + std::to_string(a.scale_max) + "]");
    }
}

/// Parses `# scale <min> <max>`, then `id<TAB>score`, then one row per caption.
inline AnnotationSet read_annotations(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotations " + path.string());

    AnnotationSet set;
    std::string line;
    std::size_t lineno = 0;
    bool have_scale = false;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::trim(line).empty()) continue;
        if (!have_scale) {
            std::istringstream is(line);
            std::string hash, word;
            int lo = 0, hi = 0;
            if (!(is >> hash >> word >> lo >> hi) || hash != "#" || word != "scale")
                throw FormatError("missing '# scale <min> <max>' declaration", lineno);
            std::string rest;
            if (is >> rest) throw FormatError("trailing text after scale declaration", lineno);
            if (lo >= hi) throw FormatError("scale min must be below max", lineno);
            set.scale_min = lo;
            set.scale_max = hi;
            have_scale = true;
            continue;
        }
        if (line.front() == '#') continue;
        if (!have_header) {
            if (line != "id\tscore") throw FormatError("expected header 'id<TAB>score'", lineno);
            have_header = true;
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
            throw FormatError("expected two tab-separated columns", lineno);
        std::string id = line.substr(0, tab);
        if (id.empty()) throw FormatError("empty id", lineno);
        double v = 0.0;
        std::size_t used = 0;
        const std::string num = line.substr(tab + 1);
        try {
            v = std::stod(num, &used);
        } catch (const std::exception&) {
            throw FormatError("score is not a number", lineno);
        }
        if (used != num.size() || !std::isfinite(v)) throw FormatError("score is not a number", lineno);
        if (v < set.scale_min || v > set.scale_max)
            throw FormatError("score " + num + " outside scale [" + std::to_string(set.scale_min) + "," +
                                  std::to_string(set.scale_max) + "]",
                              lineno);
        if (!set.labels.emplace(std::move(id), v).second)
            throw FormatError("duplicate id '" + line.substr(0, tab) + "'", lineno);
    }
    if (!have_scale) throw FormatError("missing '# scale <min> <max>' declaration");
    return set;
}

inline void write_annotations(const AnnotationSet& set, const fs::path& path) {
    validate(set);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "# scale " << set.scale_min << ' ' << set.scale_max << '\n' << "id\tscore\n";
    out << std::setprecision(17);
    for (const auto& [id, v] : set.labels) out << id << '\t' << v << '\n';
    if (!out) throw IoError("write failure on " + path.string());
}

} // namespace icc
