#pragma once

// Command-line wiring. dispatch() is the whole CLI minus process plumbing so
// tests can drive it in-process.

#include <atomic>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "icc/corpus.hpp"
#include "icc/curate.hpp"
#include "icc/error.hpp"
#include "icc/fusion.hpp"
#include "icc/gateway.hpp"
#include "icc/metrics.hpp"
#include "icc/standardize.hpp"

namespace icc::cli {

struct CommandResult {
    int exit_code = 0;
    /// `key=value` lines (or help text).
    std::string summary;
};

/// Ordered key=value summary.
class Summary {
public:
    template <class T>
    void set(const std::string& key, const T& value) {
        std::ostringstream os;
        if constexpr (std::is_floating_point_v<T>) os << std::setprecision(17);
        os << value;
        entries_.emplace_back(key, os.str());
    }
    void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

    std::string str() const {
        std::string out;
        for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
        return out;
    }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

namespace detail {

struct Common {
    std::string input;
    std::string output;
    bool strict = false;
    bool lenient = false;
    std::size_t workers = 1;

    ReadMode mode() const { return lenient ? ReadMode::lenient : ReadMode::strict; }
};

inline void add_input(CLI::App* cmd, Common& c) {
    cmd->add_option("--input", c.input, "Corpus file or glob of shard files")->required();
}

inline void add_mode(CLI::App* cmd, Common& c) {
    auto* s = cmd->add_flag("--strict", c.strict, "Abort on malformed lines and missing scores (default)");
    auto* l = cmd->add_flag("--lenient", c.lenient, "Skip and count malformed lines and missing scores");
    s->excludes(l);
}

inline void add_workers(CLI::App* cmd, Common& c) {
    cmd->add_option("--workers", c.workers, "Shard-level worker threads")->check(CLI::PositiveNumber);
}

inline void add_read_summary(Summary& s, const ReadStats& r) {
    s.set("records_read", r.records);
    s.set("malformed_skipped", r.skipped);
    s.set("duplicate_ids", r.duplicates);
}

struct Counters {
    ReadStats read;
    ProcessStats process;
    AttachStats attach;

    void add(const Counters& o) {
        read.lines += o.read.lines;
        read.records += o.read.records;
        read.skipped += o.read.skipped;
        read.duplicates += o.read.duplicates;
        process.processed += o.process.processed;
        process.emitted += o.process.emitted;
        process.skipped += o.process.skipped;
        attach.scored += o.attach.scored;
        attach.failed += o.attach.failed;
    }
};

inline void append_file(const fs::path& from, std::ofstream& to) {
    std::ifstream in(from, std::ios::binary);
    to << in.rdbuf();
}

inline fs::path part_path(const fs::path& base, std::size_t shard) {
    fs::path p = base;
    p += ".part-" + std::to_string(shard);
    return p;
}

/// Runs fn(worker, shard_path, writer, side) over every input shard. With one
/// worker, output streams straight to `output`; otherwise each shard writes a
/// part file and parts are concatenated in shard order, so bytes do not depend
/// on the worker count. `side` optionally collects a second line stream.
template <class PerShard>
Counters run_sharded(const std::vector<fs::path>& shards, const fs::path& output, std::size_t workers,
                     const std::optional<fs::path>& side_output, PerShard&& fn) {
    Counters total;
    workers = std::max<std::size_t>(1, std::min(workers, shards.size()));
    if (workers == 1) {
        CorpusWriter w(output);
        std::optional<std::ofstream> side;
        if (side_output) side.emplace(*side_output, std::ios::binary | std::ios::trunc);
        std::exception_ptr err;
        for (const auto& shard : shards) {
            try {
                total.add(fn(std::size_t{0}, shard, w, side ? &*side : nullptr));
            } catch (...) {
                err = std::current_exception();
                break;
            }
        }
        w.close();
        if (err) std::rethrow_exception(err);
        return total;
    }

    std::vector<Counters> per_shard(shards.size());
    std::vector<std::exception_ptr> errors(shards.size());
    std::atomic<std::size_t> next{0};
    const auto work = [&](std::size_t worker) {
        for (std::size_t i; (i = next.fetch_add(1)) < shards.size();) {
            try {
                CorpusWriter w(part_path(output, i));
                std::optional<std::ofstream> side;
                if (side_output) side.emplace(part_path(*side_output, i), std::ios::binary | std::ios::trunc);
                per_shard[i] = fn(worker, shards[i], w, side ? &*side : nullptr);
                w.close();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < workers; ++k) pool.emplace_back(work, k);
    for (auto& t : pool) t.join();

    std::ofstream out(output, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + output.string());
    std::optional<std::ofstream> side;
    if (side_output) side.emplace(*side_output, std::ios::binary | std::ios::trunc);
    std::exception_ptr first_error;
    for (std::size_t i = 0; i < shards.size(); ++i) {
        const fs::path part = part_path(output, i);
        if (fs::exists(part)) {
            if (!first_error) append_file(part, out);
            fs::remove(part);
        }
        if (side_output) {
            const fs::path sp = part_path(*side_output, i);
            if (fs::exists(sp)) {
                if (!first_error) append_file(sp, *side);
                fs::remove(sp);
            }
        }
        if (errors[i] && !first_error) first_error = errors[i];
        if (!first_error) total.add(per_shard[i]);
    }
    if (first_error) std::rethrow_exception(first_error);
    return total;
}

inline void collect_read(Counters& c, const CorpusReader& r) {
    c.read = r.stats();
}

inline std::vector<double> parse_fractions(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            throw Error("invalid fraction '" + item + "'");
        }
        if (used != item.size()) throw Error("invalid fraction '" + item + "'");
        out.push_back(v);
    }
    return out;
}

} // namespace detail

inline CommandResult dispatch(const std::vector<std::string>& argv) {
    using namespace detail;

    CLI::App app{"Image-caption concreteness curation toolkit", "icc"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    Common common;
    Summary summary;

    // score -----------------------------------------------------------------
    std::string endpoint, score_name = "icc", failures_path;
    std::size_t batch_size = 256, max_in_flight = 64;
    long long timeout_ms = 30000;
    auto* score = app.add_subcommand("score", "Attach scores from a scorer endpoint");
    add_input(score, common);
    score->add_option("--output", common.output, "Output corpus path")->required();
    score->add_option("--endpoint", endpoint, "cmd:<argv> | tcp:<host>:<port> | stub[:salt] | table:<path>")
        ->required();
    score->add_option("--score", score_name, "Name of the attached score");
    score->add_option("--batch-size", batch_size, "Records per scorer batch")->check(CLI::PositiveNumber);
    score->add_option("--max-in-flight", max_in_flight, "Outstanding requests per connection")
        ->check(CLI::PositiveNumber);
    score->add_option("--timeout-ms", timeout_ms, "Per-request timeout in milliseconds")->check(CLI::PositiveNumber);
    score->add_option("--failures", failures_path, "Failure side file (default <output>.failures.jsonl)");
    add_mode(score, common);
    add_workers(score, common);

    // standardize-fit ------------------------------------------------------
    std::string transform = "standard", length_unit = "words", model_path;
    StandardizeConfig std_config;
    auto* sfit = app.add_subcommand("standardize-fit", "Fit per-caption-length standardization statistics");
    add_input(sfit, common);
    sfit->add_option("--output", common.output, "Standardizer model path")->required();
    sfit->add_option("--score", score_name, "Score to standardize")->required();
    sfit->add_option("--transform", transform, "standard|paper-literal")
        ->check(CLI::IsMember({"standard", "paper-literal"}));
    sfit->add_option("--length-unit", length_unit, "words|chars")->check(CLI::IsMember({"words", "chars"}));
    sfit->add_option("--clamp-eps", std_config.clamp_eps, "Similarities are clamped to [eps, 1-eps]");
    sfit->add_option("--min-bucket-count", std_config.min_bucket_count,
                     "Smaller length buckets fall back to pooled statistics");
    add_mode(sfit, common);
    add_workers(sfit, common);

    // standardize-apply ----------------------------------------------------
    auto* sapply = app.add_subcommand("standardize-apply", "Add <score>_std using a fitted standardizer");
    add_input(sapply, common);
    sapply->add_option("--output", common.output, "Output corpus path")->required();
    sapply->add_option("--model", model_path, "Standardizer model path")->required();
    sapply->add_option("--score", score_name, "Score to standardize")->required();
    add_mode(sapply, common);
    add_workers(sapply, common);

    // fuse-fit ---------------------------------------------------------------
    std::string vba_name = "vba", sba_name = "sba", annotations_path, binarize = "median";
    double theta = 0.0;
    FitConfig fit_config;
    auto* ffit = app.add_subcommand("fuse-fit", "Fit sigmoid(a*vba + b*sba + c) to binarized annotations");
    add_input(ffit, common);
    ffit->add_option("--output", common.output, "Fusion params path")->required();
    ffit->add_option("--annotations", annotations_path, "Annotation TSV")->required();
    ffit->add_option("--vba", vba_name, "VBA score name");
    ffit->add_option("--sba", sba_name, "SBA score name");
    ffit->add_option("--binarize", binarize, "median|threshold")->check(CLI::IsMember({"median", "threshold"}));
    ffit->add_option("--theta", theta, "Threshold for --binarize threshold");
    ffit->add_option("--l2", fit_config.l2, "Ridge penalty on a and b");
    ffit->add_option("--tol", fit_config.tol, "Convergence tolerance on parameter change");
    ffit->add_option("--max-iters", fit_config.max_iters, "Solver iteration cap");
    add_mode(ffit, common);

    // fuse-apply -------------------------------------------------------------
    std::string params_spec = "paper-a8", out_name = "icc";
    auto* fapply = app.add_subcommand("fuse-apply", "Add the fused score to each record");
    add_input(fapply, common);
    fapply->add_option("--output", common.output, "Output corpus path")->required();
    fapply->add_option("--params", params_spec, "Fusion params path or preset paper-a8");
    fapply->add_option("--vba", vba_name, "VBA score name");
    fapply->add_option("--sba", sba_name, "SBA score name");
    fapply->add_option("--out", out_name, "Name of the fused score");
    add_mode(fapply, common);
    add_workers(fapply, common);

    // filter -----------------------------------------------------------------
    std::string method = "top_k", spec_path, pre_method, pre_score;
    std::size_t k = 0, pre_k = 0, budget_iterations = 0, budget_batch = 0;
    double pre_theta = 0.0;
    std::uint64_t seed = 0, pre_seed = 0;
    auto* filter = app.add_subcommand("filter", "Budgeted selection: top_k, threshold or seeded random");
    add_input(filter, common);
    filter->add_option("--output", common.output, "Output corpus path")->required();
    filter->add_option("--spec", spec_path, "Selection spec file (overrides method flags)");
    filter->add_option("--method", method, "top_k|threshold|random")
        ->check(CLI::IsMember({"top_k", "threshold", "random"}));
    filter->add_option("--score", score_name, "Score to select on");
    filter->add_option("--k", k, "Records to keep (top_k, random)");
    filter->add_option("--theta", theta, "Minimum score (threshold)");
    filter->add_option("--seed", seed, "Seed (random)");
    filter->add_option("--prefilter-method", pre_method, "Optional first-stage method")
        ->check(CLI::IsMember({"top_k", "threshold", "random"}));
    filter->add_option("--prefilter-score", pre_score, "First-stage score");
    filter->add_option("--prefilter-k", pre_k, "First-stage k");
    filter->add_option("--prefilter-theta", pre_theta, "First-stage theta");
    filter->add_option("--prefilter-seed", pre_seed, "First-stage seed");
    filter->add_option("--iterations", budget_iterations, "Training iterations N, reports epochs over the subset");
    filter->add_option("--train-batch-size", budget_batch, "Training batch size for the epoch report");
    add_mode(filter, common);
    add_workers(filter, common);

    // eval-corr --------------------------------------------------------------
    std::string score_space = "auto";
    auto* eval = app.add_subcommand("eval-corr", "Pearson, Spearman and Kendall tau-b against annotations");
    add_input(eval, common);
    eval->add_option("--score", score_name, "Score to evaluate")->required();
    eval->add_option("--annotations", annotations_path, "Annotation TSV")->required();
    eval->add_option("--score-space", score_space, "auto|raw|standardized (auto: *_std names are standardized)")
        ->check(CLI::IsMember({"auto", "raw", "standardized"}));
    add_mode(eval, common);

    // emit-distill -----------------------------------------------------------
    std::string target = "probability";
    auto* emit = app.add_subcommand("emit-distill", "Write {caption, target} distillation pairs");
    add_input(emit, common);
    emit->add_option("--output", common.output, "Distillation set path")->required();
    emit->add_option("--score", score_name, "Target score");
    emit->add_option("--target", target, "probability|logit")->check(CLI::IsMember({"probability", "logit"}));
    add_mode(emit, common);

    // split ------------------------------------------------------------------
    std::string fractions = "0.8,0.2";
    auto* split = app.add_subcommand("split", "Seeded partition into parts of the given fractions");
    add_input(split, common);
    split->add_option("--output", common.output, "Output prefix; parts are <prefix>-partN.jsonl")->required();
    split->add_option("--fractions", fractions, "Comma-separated fractions, sum <= 1");
    split->add_option("--seed", seed, "Shuffle seed");
    add_mode(split, common);

    // shard ------------------------------------------------------------------
    std::size_t shard_size = 100000;
    auto* shard_cmd = app.add_subcommand("shard", "Split a corpus into fixed-size shard files");
    add_input(shard_cmd, common);
    shard_cmd->add_option("--output", common.output, "Output directory")->required();
    shard_cmd->add_option("--shard-size", shard_size, "Records per shard")->check(CLI::PositiveNumber);
    add_mode(shard_cmd, common);

    try {
        std::vector<std::string> args(argv.rbegin(), argv.rend());
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target_app = &app;
        for (auto* sub : app.get_subcommands()) target_app = sub;
        return {0, target_app->help()};
    } catch (const CLI::ParseError& e) {
        Summary s;
        s.set("error", std::string(e.what()));
        return {2, s.str()};
    }

    try {
        const auto inputs = [&] { return expand_inputs(common.input); };

        if (score->parsed()) {
            summary.set("command", std::string("score"));
            const fs::path fail_path = failures_path.empty() ? fs::path(common.output + ".failures.jsonl")
                                                             : fs::path(failures_path);
            const BatchOptions opts{std::chrono::milliseconds(timeout_ms), max_in_flight};
            const auto shards = inputs();
            const std::size_t workers = std::max<std::size_t>(1, std::min(common.workers, shards.size()));
            std::vector<std::unique_ptr<ScorerClient>> clients;
            for (std::size_t w = 0; w < workers; ++w) clients.push_back(open_endpoint(endpoint));
            auto c = run_sharded(shards, common.output, workers, fail_path,
                                 [&](std::size_t worker, const fs::path& in, CorpusWriter& out, std::ofstream* side) {
                                     Counters cs;
                                     CorpusReader reader(in, common.mode());
                                     cs.attach = attach_scores(
                                         reader, *clients[worker], score_name, batch_size, opts,
                                         [&](CaptionRecord&& r) { out.write(r); },
                                         [&](const ScoreFailure& f) { *side << encode_failure(f); });
                                     collect_read(cs, reader);
                                     return cs;
                                 });
            add_read_summary(summary, c.read);
            summary.set("scored", c.attach.scored);
            summary.set("failed", c.attach.failed);
            summary.set("failures_path", fail_path.string());
            summary.set("output", common.output);
        } else if (sfit->parsed()) {
            summary.set("command", std::string("standardize-fit"));
            std_config.transform = parse_transform(transform);
            std_config.length_unit = parse_length_unit(length_unit);
            validate(std_config);
            const auto shards = inputs();
            const std::size_t workers = std::max<std::size_t>(1, std::min(common.workers, shards.size()));
            std::vector<StandardizerFit> partial(shards.size(), StandardizerFit(std_config));
            std::vector<Counters> counts(shards.size());
            std::vector<std::exception_ptr> errors(shards.size());
            std::atomic<std::size_t> next{0};
            const auto work = [&] {
                for (std::size_t i; (i = next.fetch_add(1)) < shards.size();) {
                    try {
                        CorpusReader reader(shards[i], common.mode());
                        while (auto r = reader.next()) {
                            ++counts[i].process.processed;
                            const auto p = r->score(score_name);
                            if (!p) {
                                if (common.mode() == ReadMode::strict) throw MissingScoreError(r->id, score_name);
                                ++counts[i].process.skipped;
                                continue;
                            }
                            partial[i].add(caption_length(r->caption, std_config.length_unit), *p);
                            ++counts[i].process.emitted;
                        }
                        collect_read(counts[i], reader);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            };
            std::vector<std::thread> pool;
            for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
            work();
            for (auto& t : pool) t.join();
            for (auto& e : errors)
                if (e) std::rethrow_exception(e);
            StandardizerFit merged(std_config);
            Counters total;
            for (std::size_t i = 0; i < shards.size(); ++i) {
                merged.merge(partial[i]);
                total.add(counts[i]);
            }
            const auto model = merged.finish();
            save_standardizer(model, common.output);
            std::size_t own = 0;
            for (const auto& [len, s] : model.buckets) own += s.count >= std_config.min_bucket_count ? 1 : 0;
            add_read_summary(summary, total.read);
            summary.set("samples", model.global.count);
            summary.set("missing_score_skipped", total.process.skipped);
            summary.set("buckets", model.buckets.size());
            summary.set("buckets_with_own_stats", own);
            summary.set("transform", to_string(std_config.transform));
            summary.set("global_mean_t", model.global.mean);
            summary.set("global_std_t", model.global.stddev());
            summary.set("output", common.output);
        } else if (sapply->parsed()) {
            summary.set("command", std::string("standardize-apply"));
            const auto model = load_standardizer(model_path);
            auto c = run_sharded(inputs(), common.output, common.workers, std::nullopt,
                                 [&](std::size_t, const fs::path& in, CorpusWriter& out, std::ofstream*) {
                                     Counters cs;
                                     CorpusReader reader(in, common.mode());
                                     cs.process = standardize_corpus(reader, score_name, model, common.mode(),
                                                                     [&](CaptionRecord&& r) { out.write(r); });
                                     collect_read(cs, reader);
                                     return cs;
                                 });
            add_read_summary(summary, c.read);
            summary.set("emitted", c.process.emitted);
            summary.set("missing_score_skipped", c.process.skipped);
            summary.set("added_score", standardized_name(score_name));
            summary.set("output", common.output);
        } else if (ffit->parsed()) {
            summary.set("command", std::string("fuse-fit"));
            const auto annotations = read_annotations(annotations_path);
            BinarizeMode mode = MedianSplit{};
            if (binarize == "threshold") mode = ThresholdSplit{theta};
            const auto labels = binarize_labels(annotations, mode);
            MultiReader reader(inputs(), common.mode());
            std::vector<FusionPoint> points;
            std::size_t missing = 0;
            std::unordered_set<std::string> matched;
            while (auto r = reader.next()) {
                auto it = labels.find(r->id);
                if (it == labels.end()) continue;
                const auto v = r->score(vba_name);
                const auto s = r->score(sba_name);
                if (!v || !s) {
                    if (common.mode() == ReadMode::strict) throw MissingScoreError(r->id, v ? sba_name : vba_name);
                    ++missing;
                    continue;
                }
                if (!matched.insert(r->id).second) continue;
                points.push_back({*v, *s, it->second});
            }
            const auto result = fit_fusion(points, fit_config);
            save_fusion_params(result.params, common.output);
            add_read_summary(summary, reader.stats());
            summary.set("points", points.size());
            summary.set("unmatched_annotations", labels.size() - matched.size());
            summary.set("missing_score_skipped", missing);
            summary.set("a", result.params.a);
            summary.set("b", result.params.b);
            summary.set("c", result.params.c);
            summary.set("iterations", result.iterations);
            summary.set("converged", result.converged);
            summary.set("final_loss", result.loss_history.back());
            if (result.hit_iteration_cap) summary.set("warning", std::string("max_iters reached before convergence"));
            summary.set("output", common.output);
        } else if (fapply->parsed()) {
            summary.set("command", std::string("fuse-apply"));
            const auto params = load_fusion_params(params_spec);
            auto c = run_sharded(inputs(), common.output, common.workers, std::nullopt,
                                 [&](std::size_t, const fs::path& in, CorpusWriter& out, std::ofstream*) {
                                     Counters cs;
                                     CorpusReader reader(in, common.mode());
                                     cs.process = fuse_corpus(reader, params, vba_name, sba_name, out_name,
                                                              common.mode(), [&](CaptionRecord&& r) { out.write(r); });
                                     collect_read(cs, reader);
                                     return cs;
                                 });
            add_read_summary(summary, c.read);
            summary.set("emitted", c.process.emitted);
            summary.set("missing_score_skipped", c.process.skipped);
            summary.set("a", params.a);
            summary.set("b", params.b);
            summary.set("c", params.c);
            summary.set("added_score", out_name);
            summary.set("output", common.output);
        } else if (filter->parsed()) {
            summary.set("command", std::string("filter"));
            SelectionSpec spec;
            if (!spec_path.empty()) {
                spec = load_selection_spec(spec_path);
            } else {
                spec.method = parse_selection_method(method);
                spec.score_name = score_name;
                if (filter->count("--k")) spec.k = k;
                if (filter->count("--theta")) spec.theta = theta;
                if (filter->count("--seed")) spec.seed = seed;
                if (!pre_method.empty()) {
                    SelectionSpec pre;
                    pre.method = parse_selection_method(pre_method);
                    pre.score_name = pre_score;
                    if (filter->count("--prefilter-k")) pre.k = pre_k;
                    if (filter->count("--prefilter-theta")) pre.theta = pre_theta;
                    if (filter->count("--prefilter-seed")) pre.seed = pre_seed;
                    spec.prefilter = std::make_shared<const SelectionSpec>(std::move(pre));
                }
                validate(spec);
            }
            const auto shards = inputs();
            CorpusWriter w(common.output);
            const auto report =
                select_shards(shards, spec, common.mode(), common.workers, [&](CaptionRecord&& r) { w.write(r); });
            w.close();
            add_read_summary(summary, report.read);
            summary.set("scanned", report.scanned);
            summary.set("selected", report.selected);
            summary.set("missing_score_skipped", report.skipped_missing);
            for (const auto& warning : report.warnings) summary.set("warning", warning);
            if (budget_iterations > 0 && report.selected > 0) {
                const auto plan = plan_epochs({report.scanned, budget_iterations, budget_batch ? budget_batch : 1},
                                              report.selected);
                summary.set("steps", plan.steps);
                summary.set("epochs", plan.epochs);
            }
            summary.set("output", common.output);
        } else if (eval->parsed()) {
            summary.set("command", std::string("eval-corr"));
            const auto annotations = read_annotations(annotations_path);
            MultiReader reader(inputs(), common.mode());
            std::vector<double> xs, ys;
            std::unordered_set<std::string> matched;
            std::size_t missing = 0;
            while (auto r = reader.next()) {
                auto it = annotations.labels.find(r->id);
                if (it == annotations.labels.end()) continue;
                const auto v = r->score(score_name);
                if (!v) {
                    if (common.mode() == ReadMode::strict) throw MissingScoreError(r->id, score_name);
                    ++missing;
                    continue;
                }
                if (!matched.insert(r->id).second) continue;
                xs.push_back(*v);
                ys.push_back(it->second);
            }
            const auto report = correlate(xs, ys);
            bool standardized = score_space == "standardized";
            if (score_space == "auto")
                standardized = score_name.size() > 4 && score_name.compare(score_name.size() - 4, 4, "_std") == 0;
            add_read_summary(summary, reader.stats());
            summary.set("score", score_name);
            summary.set("score_space", std::string(standardized ? "standardized" : "raw"));
            summary.set("n", report.n);
            summary.set("unmatched_annotations", annotations.labels.size() - matched.size());
            summary.set("missing_score_skipped", missing);
            summary.set("pearson", report.pearson);
            summary.set("spearman", report.spearman);
            summary.set("kendall", report.kendall);
        } else if (emit->parsed()) {
            summary.set("command", std::string("emit-distill"));
            MultiReader reader(inputs(), common.mode());
            const auto st = emit_distillation_set(reader, score_name, parse_target_space(target), common.output,
                                                  common.mode());
            add_read_summary(summary, reader.stats());
            summary.set("emitted", st.emitted);
            summary.set("missing_score_skipped", st.skipped);
            summary.set("target_space", target);
            summary.set("output", common.output);
            summary.set("metadata", distillation_meta_path(common.output).string());
        } else if (split->parsed()) {
            summary.set("command", std::string("split"));
            const auto fr = parse_fractions(fractions);
            const auto shards = inputs();
            std::size_t n = 0;
            {
                MultiReader counter(shards, common.mode());
                while (counter.next()) ++n;
            }
            const auto labels = split_assignment(n, fr, seed);
            std::vector<std::unique_ptr<CorpusWriter>> writers;
            for (std::size_t p = 0; p < fr.size(); ++p)
                writers.push_back(std::make_unique<CorpusWriter>(common.output + "-part" + std::to_string(p) + ".jsonl"));
            MultiReader reader(shards, common.mode());
            std::size_t i = 0;
            while (auto r = reader.next()) {
                const int part = labels[i++];
                if (part >= 0) writers[static_cast<std::size_t>(part)]->write(*r);
            }
            add_read_summary(summary, reader.stats());
            for (std::size_t p = 0; p < writers.size(); ++p) {
                writers[p]->close();
                summary.set("part" + std::to_string(p), writers[p]->count());
            }
            summary.set("unassigned", static_cast<std::size_t>(std::count(labels.begin(), labels.end(), -1)));
        } else if (shard_cmd->parsed()) {
            summary.set("command", std::string("shard"));
            MultiReader reader(inputs(), common.mode());
            const auto manifest = shard(reader, shard_size, common.output);
            add_read_summary(summary, reader.stats());
            summary.set("total", manifest.total);
            summary.set("shards", manifest.shard_paths.size());
            summary.set("manifest", (fs::path(common.output) / "manifest.json").string());
        }
    } catch (const std::exception& e) {
        summary.set("error", std::string(e.what()));
        return {1, summary.str()};
    }
    return {0, summary.str()};
}

/// Parses `key=value` summary lines (last value wins for repeated keys).
inline std::map<std::string, std::string> parse_summary(const std::string& s) {
    std::map<std::string, std::string> out;
    std::istringstream is(s);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return out;
}

} // namespace icc::cli
