#pragma once

// Budgeted dataset selection (top-k, threshold, seeded random, stacked
// prefilters), training-budget arithmetic, distillation-set emission and
// seeded corpus splits.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "icc/corpus.hpp"
#include "icc/error.hpp"
#include "icc/hash.hpp"
#include "icc/standardize.hpp"

namespace icc {

enum class SelectionMethod { top_k, threshold, random };

inline std::string to_string(SelectionMethod m) {
    switch (m) {
    case SelectionMethod::top_k: return "top_k";
    case SelectionMethod::threshold: return "threshold";
    case SelectionMethod::random: return "random";
    }
    return "?";
}

inline SelectionMethod parse_selection_method(const std::string& s) {
    if (s == "top_k") return SelectionMethod::top_k;
    if (s == "threshold") return SelectionMethod::threshold;
    if (s == "random") return SelectionMethod::random;
    throw Error("unknown selection method '" + s + "' (expected top_k|threshold|random)");
}

struct SelectionSpec {
    SelectionMethod method = SelectionMethod::top_k;
    std::string score_name;
    std::optional<std::size_t> k;
    std::optional<double> theta;
    std::optional<std::uint64_t> seed;
    /// Applied first; this spec then runs on its output.
    std::shared_ptr<const SelectionSpec> prefilter;
};

inline void validate(const SelectionSpec& s) {
    switch (s.method) {
    case SelectionMethod::top_k:
        if (!s.k || *s.k < 1) throw Error("top_k selection requires k >= 1");
        if (s.score_name.empty()) throw Error("top_k selection requires a score name");
        break;
    case SelectionMethod::threshold:
        if (!s.theta || !std::isfinite(*s.theta)) throw Error("threshold selection requires theta");
        if (s.score_name.empty()) throw Error("threshold selection requires a score name");
        break;
    case SelectionMethod::random:
        if (!s.k || *s.k < 1) throw Error("random selection requires k >= 1");
        if (!s.seed) throw Error("random selection requires a seed");
        break;
    }
    if (s.prefilter) validate(*s.prefilter);
}

inline ordered_json to_json(const SelectionSpec& s) {
    ordered_json j;
    j["method"] = to_string(s.method);
    if (s.method != SelectionMethod::random) j["score_name"] = s.score_name;
    if (s.k) j["k"] = *s.k;
    if (s.theta) j["theta"] = *s.theta;
    if (s.seed) j["seed"] = *s.seed;
    if (s.prefilter) j["prefilter"] = to_json(*s.prefilter);
    return j;
}

inline SelectionSpec selection_spec_from_json(const json& j) {
    SelectionSpec s;
    try {
        s.method = parse_selection_method(j.at("method").get<std::string>());
        s.score_name = j.value("score_name", std::string());
        if (j.contains("k")) s.k = j.at("k").get<std::size_t>();
        if (j.contains("theta")) s.theta = j.at("theta").get<double>();
        if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("prefilter") && !j.at("prefilter").is_null())
            s.prefilter = std::make_shared<const SelectionSpec>(selection_spec_from_json(j.at("prefilter")));
    } catch (const json::exception& e) {
        throw FormatError(std::string("selection spec: ") + e.what());
    }
    validate(s);
    return s;
}

inline SelectionSpec load_selection_spec(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return selection_spec_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

/// Priority used by seeded random selection; a pure function of (seed, id) so
/// the sample does not depend on scan order or worker count.
inline double random_priority(std::uint64_t seed, std::string_view id) {
    return hash::unit_double(hash::mix64(hash::fnv1a64(id) ^ hash::mix64(seed)));
}

struct SelectionReport {
    std::size_t scanned = 0;
    std::size_t selected = 0;
    std::size_t skipped_missing = 0;
    ReadStats read;
    std::vector<std::string> warnings;
};

namespace detail {

struct Position {
    std::size_t shard = 0;
    std::size_t index = 0;
    auto operator<=>(const Position&) const = default;
};

struct Candidate {
    Position pos;
    double key = 0.0;
    CaptionRecord record;
};

// Higher key first, then ascending id.
inline bool ranks_before(const Candidate& x, const Candidate& y) {
    if (x.key != y.key) return x.key > y.key;
    return x.record.id < y.record.id;
}

/// Keeps the k best candidates in a min-heap whose top is the current worst.
class BoundedSelector {
public:
    explicit BoundedSelector(std::size_t k) : k_(k) {}

    void offer(Candidate&& c) {
        ++offered_;
        if (heap_.size() < k_) {
            heap_.push_back(std::move(c));
            std::push_heap(heap_.begin(), heap_.end(), ranks_before);
        } else if (ranks_before(c, heap_.front())) {
            std::pop_heap(heap_.begin(), heap_.end(), ranks_before);
            heap_.back() = std::move(c);
            std::push_heap(heap_.begin(), heap_.end(), ranks_before);
        }
    }

    void merge(BoundedSelector&& other) {
        const std::size_t seen = offered_ + other.offered_;
        for (auto& c : other.heap_) offer(std::move(c));
        offered_ = seen;
    }

    std::size_t offered() const noexcept { return offered_; }

    /// Survivors in corpus order.
    std::vector<Candidate> finish() && {
        std::sort(heap_.begin(), heap_.end(), [](const Candidate& x, const Candidate& y) { return x.pos < y.pos; });
        return std::move(heap_);
    }

private:
    std::size_t k_;
    std::size_t offered_ = 0;
    std::vector<Candidate> heap_;
};

struct ShardScanner {
    std::size_t shard_count = 0;
    /// Calls emit(position, record) for every record of one shard, in order.
    std::function<void(std::size_t shard, const std::function<void(Position, CaptionRecord&&)>& emit,
                       ReadStats& stats)>
        scan;
};

inline ShardScanner file_scanner(const std::vector<fs::path>& shards, ReadMode mode) {
    return {shards.size(), [&shards, mode](std::size_t shard, const auto& emit, ReadStats& stats) {
                CorpusReader reader(shards[shard], mode);
                std::size_t index = 0;
                while (auto r = reader.next()) emit(Position{shard, index++}, std::move(*r));
                const auto& s = reader.stats();
                stats.lines += s.lines;
                stats.records += s.records;
                stats.skipped += s.skipped;
                stats.duplicates += s.duplicates;
            }};
}

inline ShardScanner memory_scanner(std::shared_ptr<std::vector<Candidate>> items) {
    return {1, [items](std::size_t, const auto& emit, ReadStats&) {
                for (auto& c : *items) emit(c.pos, std::move(c.record));
            }};
}

// Passes records through threshold stages; handles records missing a score.
class PredicateChain {
public:
    PredicateChain(std::vector<const SelectionSpec*> stages, ReadMode mode) : stages_(std::move(stages)), mode_(mode) {}

    bool empty() const noexcept { return stages_.empty(); }

    /// Returns false if the record is dropped; counts missing-score skips.
    bool admits(const CaptionRecord& r, std::size_t& skipped_missing) const {
        for (const SelectionSpec* s : stages_) {
            const auto v = r.score(s->score_name);
            if (!v) {
                if (mode_ == ReadMode::strict) throw MissingScoreError(r.id, s->score_name);
                ++skipped_missing;
                return false;
            }
            if (!(*v >= *s->theta)) return false;
        }
        return true;
    }

private:
    std::vector<const SelectionSpec*> stages_;
    ReadMode mode_;
};

inline std::vector<const SelectionSpec*> flatten(const SelectionSpec& outer) {
    std::vector<const SelectionSpec*> chain;
    for (const SelectionSpec* s = &outer; s; s = s->prefilter.get()) chain.push_back(s);
    std::reverse(chain.begin(), chain.end());
    return chain;
}

inline void add_read_stats(ReadStats& into, const ReadStats& s) {
    into.lines += s.lines;
    into.records += s.records;
    into.skipped += s.skipped;
    into.duplicates += s.duplicates;
}

// Runs one bounded stage (top_k or random) over every shard with `workers` threads.
inline std::vector<Candidate> run_bounded_stage(const ShardScanner& input, const PredicateChain& pre,
                                                const SelectionSpec& stage, ReadMode mode, std::size_t workers,
                                                bool first_scan, SelectionReport& report) {
    workers = std::max<std::size_t>(1, std::min(workers, input.shard_count));
    std::vector<BoundedSelector> selectors(workers, BoundedSelector(*stage.k));
    std::vector<ReadStats> read(workers);
    std::vector<std::size_t> scanned(workers, 0), missing(workers, 0);
    std::atomic<std::size_t> next_shard{0};
    std::vector<std::exception_ptr> errors(workers);

    const auto work = [&](std::size_t w) {
        try {
            for (std::size_t shard; (shard = next_shard.fetch_add(1)) < input.shard_count;) {
                input.scan(
                    shard,
                    [&](Position pos, CaptionRecord&& r) {
                        ++scanned[w];
                        if (!pre.admits(r, missing[w])) return;
                        double key = 0.0;
                        if (stage.method == SelectionMethod::random) {
                            key = random_priority(*stage.seed, r.id);
                        } else {
                            const auto v = r.score(stage.score_name);
                            if (!v) {
                                if (mode == ReadMode::strict) throw MissingScoreError(r.id, stage.score_name);
                                ++missing[w];
                                return;
                            }
                            key = *v;
                        }
                        selectors[w].offer(Candidate{pos, key, std::move(r)});
                    },
                    read[w]);
            }
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };

    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    for (std::size_t w = 1; w < workers; ++w) selectors[0].merge(std::move(selectors[w]));
    for (std::size_t w = 0; w < workers; ++w) {
        if (first_scan) {
            report.scanned += scanned[w];
            add_read_stats(report.read, read[w]);
        }
        report.skipped_missing += missing[w];
    }
    const std::size_t available = selectors[0].offered();
    if (*stage.k > available) {
        report.warnings.push_back(to_string(stage.method) + ": k=" + std::to_string(*stage.k) +
                                  " exceeds available records (" + std::to_string(available) +
                                  "); returning all");
    }
    return std::move(selectors[0]).finish();
}

template <class Sink>
SelectionReport run_selection(const ShardScanner& files, const SelectionSpec& spec, ReadMode mode,
                              std::size_t workers, Sink&& sink) {
    validate(spec);
    SelectionReport report;
    const auto chain = flatten(spec);

    ShardScanner current = files;
    bool first_scan = true;
    std::vector<const SelectionSpec*> pending;
    std::shared_ptr<std::vector<Candidate>> materialized;

    for (const SelectionSpec* stage : chain) {
        if (stage->method == SelectionMethod::threshold) {
            pending.push_back(stage);
            continue;
        }
        const PredicateChain pre(std::move(pending), mode);
        pending.clear();
        materialized = std::make_shared<std::vector<Candidate>>(
            run_bounded_stage(current, pre, *stage, mode, workers, first_scan, report));
        first_scan = false;
        current = memory_scanner(materialized);
    }

    // Trailing threshold stages stream in corpus order; no buffering needed.
    const PredicateChain tail(std::move(pending), mode);
    ReadStats tail_read;
    for (std::size_t shard = 0; shard < current.shard_count; ++shard) {
        current.scan(
            shard,
            [&](Position, CaptionRecord&& r) {
                if (first_scan) ++report.scanned;
                if (!tail.admits(r, report.skipped_missing)) return;
                ++report.selected;
                sink(std::move(r));
            },
            tail_read);
    }
    if (first_scan) add_read_stats(report.read, tail_read);
    return report;
}

} // namespace detail

/// Selects from corpus shards (one file each). Output preserves corpus order:
/// shards in the given order, records in file order.
template <class Sink>
SelectionReport select_shards(const std::vector<fs::path>& shards, const SelectionSpec& spec, ReadMode mode,
                              std::size_t workers, Sink&& sink) {
    return detail::run_selection(detail::file_scanner(shards, mode), spec, mode, workers, std::forward<Sink>(sink));
}

/// In-memory selection; see select_shards.
inline std::vector<CaptionRecord> select(const std::vector<CaptionRecord>& records, const SelectionSpec& spec,
                                         ReadMode mode = ReadMode::strict, SelectionReport* report = nullptr) {
    auto items = std::make_shared<std::vector<detail::Candidate>>();
    items->reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) items->push_back({{0, i}, 0.0, records[i]});
    std::vector<CaptionRecord> out;
    auto rep = detail::run_selection(detail::memory_scanner(items), spec, mode, 1,
                                     [&](CaptionRecord&& r) { out.push_back(std::move(r)); });
    if (report) *report = std::move(rep);
    return out;
}

// ---------------------------------------------------------------------------
// Training budget

struct TrainingBudget {
    std::size_t dataset_size = 1;  // M
    std::size_t iterations = 1;    // N
    std::size_t batch_size = 1;
};

struct EpochPlan {
    double epochs = 0.0;
    std::size_t steps = 0;
};

/// A fixed number of optimizer steps over a filtered subset: steps stay at N,
/// epochs = N * batch / selected.
inline EpochPlan plan_epochs(const TrainingBudget& budget, std::size_t selected_count) {
    if (budget.dataset_size < 1 || budget.iterations < 1 || budget.batch_size < 1)
        throw Error("training budget values must be at least 1");
    if (selected_count < 1) throw Error("plan_epochs: selected_count must be at least 1");
    return {static_cast<double>(budget.iterations) * static_cast<double>(budget.batch_size) /
                static_cast<double>(selected_count),
            budget.iterations};
}

// ---------------------------------------------------------------------------
// Distillation set

enum class TargetSpace { probability, logit };

inline std::string to_string(TargetSpace t) { return t == TargetSpace::probability ? "probability" : "logit"; }

inline TargetSpace parse_target_space(const std::string& s) {
    if (s == "probability") return TargetSpace::probability;
    if (s == "logit") return TargetSpace::logit;
    throw Error("unknown target space '" + s + "' (expected probability|logit)");
}

inline double distillation_target(double t, TargetSpace space) {
    if (space == TargetSpace::probability) return t;
    if (!(t > 0.0 && t < 1.0)) throw Error("logit target requires a score strictly inside (0,1)");
    return std::log(t / (1.0 - t));
}

inline fs::path distillation_meta_path(const fs::path& out) {
    fs::path p = out;
    p += ".meta.json";
    return p;
}

/// Writes {caption, target} lines and a `<out>.meta.json` sidecar recording
/// the target score and space.
template <RecordSource S>
ProcessStats emit_distillation_set(S& source, const std::string& target_score, TargetSpace space,
                                   const fs::path& out, ReadMode mode = ReadMode::strict) {
    std::ofstream os(out, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + out.string());
    ProcessStats st;
    while (auto r = source.next()) {
        ++st.processed;
        const auto t = r->score(target_score);
        if (!t) {
            if (mode == ReadMode::strict) throw MissingScoreError(r->id, target_score);
            ++st.skipped;
            continue;
        }
        ordered_json j;
        j["caption"] = r->caption;
        try {
            j["target"] = distillation_target(*t, space);
        } catch (const Error& e) {
            throw Error("record '" + r->id + "': " + e.what());
        }
        os << j.dump() << '\n';
        ++st.emitted;
    }
    os.close();
    if (os.fail()) throw IoError("write failure on " + out.string());

    ordered_json meta;
    meta["format_version"] = 1;
    meta["target_score"] = target_score;
    meta["target_space"] = to_string(space);
    meta["count"] = st.emitted;
    std::ofstream ms(distillation_meta_path(out), std::ios::trunc);
    ms << meta.dump(2) << '\n';
    if (!ms) throw IoError("cannot write " + distillation_meta_path(out).string());
    return st;
}

// ---------------------------------------------------------------------------
// Seeded splits

/// Part sizes by largest remainder over fraction * n; leftover records (when
/// fractions sum below 1) are left unassigned.
inline std::vector<std::size_t> split_sizes(std::size_t n, std::span<const double> fractions) {
    if (fractions.empty()) throw Error("split: no fractions");
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0) || !std::isfinite(f)) throw Error("split: fractions must be positive");
        sum += f;
    }
    if (sum > 1.0 + 1e-9) throw Error("split: fractions sum above 1");

    constexpr double kSlack = 1e-9;
    const auto total = static_cast<std::size_t>(std::floor(std::min(sum, 1.0) * static_cast<double>(n) + kSlack));
    std::vector<std::size_t> sizes(fractions.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        const double exact = fractions[i] * static_cast<double>(n);
        sizes[i] = static_cast<std::size_t>(std::floor(exact + kSlack));
        assigned += sizes[i];
        remainders.emplace_back(exact - static_cast<double>(sizes[i]), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t r = 0; assigned < total && r < remainders.size(); ++r, ++assigned) ++sizes[remainders[r].second];
    return sizes;
}

/// Part index for each of n records (-1 = unassigned): a seeded Fisher-Yates
/// shuffle of the part labels.
inline std::vector<int> split_assignment(std::size_t n, std::span<const double> fractions, std::uint64_t seed) {
    const auto sizes = split_sizes(n, fractions);
    std::vector<int> labels(n, -1);
    std::size_t pos = 0;
    for (std::size_t part = 0; part < sizes.size(); ++part)
        for (std::size_t j = 0; j < sizes[part]; ++j) labels[pos++] = static_cast<int>(part);
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[hash::bounded(rng, i)]);
    return labels;
}

inline std::vector<std::vector<CaptionRecord>> split_corpus(const std::vector<CaptionRecord>& records,
                                                            std::span<const double> fractions, std::uint64_t seed) {
    const auto labels = split_assignment(records.size(), fractions, seed);
    std::vector<std::vector<CaptionRecord>> parts(fractions.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        if (labels[i] >= 0) parts[static_cast<std::size_t>(labels[i])].push_back(records[i]);
    return parts;
}

} // namespace icc
