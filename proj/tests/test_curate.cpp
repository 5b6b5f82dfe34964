#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "icc/curate.hpp"
#include "oracles.hpp"

using namespace icc;
using testutil::record;

namespace {

SelectionSpec top_k(std::string score, std::size_t k, std::shared_ptr<const SelectionSpec> pre = nullptr) {
    SelectionSpec s;
    s.method = SelectionMethod::top_k;
    s.score_name = std::move(score);
    s.k = k;
    s.prefilter = std::move(pre);
    return s;
}

SelectionSpec threshold(std::string score, double theta, std::shared_ptr<const SelectionSpec> pre = nullptr) {
    SelectionSpec s;
    s.method = SelectionMethod::threshold;
    s.score_name = std::move(score);
    s.theta = theta;
    s.prefilter = std::move(pre);
    return s;
}

SelectionSpec random_k(std::size_t k, std::uint64_t seed, std::shared_ptr<const SelectionSpec> pre = nullptr) {
    SelectionSpec s;
    s.method = SelectionMethod::random;
    s.k = k;
    s.seed = seed;
    s.prefilter = std::move(pre);
    return s;
}

template <class T>
std::shared_ptr<const SelectionSpec> share(T&& s) {
    return std::make_shared<const SelectionSpec>(std::forward<T>(s));
}

// Seeded random-k reference: the k largest priorities, in input order.
std::vector<CaptionRecord> oracle_random(const std::vector<CaptionRecord>& in, std::size_t k, std::uint64_t seed) {
    std::vector<std::size_t> idx(in.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double pa = random_priority(seed, in[a].id), pb = random_priority(seed, in[b].id);
        return pa != pb ? pa > pb : in[a].id < in[b].id;
    });
    idx.resize(std::min(k, idx.size()));
    std::sort(idx.begin(), idx.end());
    std::vector<CaptionRecord> out;
    for (auto i : idx) out.push_back(in[i]);
    return out;
}

// Scores drawn from a coarse grid so ties are frequent.
std::vector<CaptionRecord> random_corpus(std::mt19937_64& rng, std::size_t n, double missing_rate = 0.0) {
    std::uniform_int_distribution<int> grid(0, 20);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<CaptionRecord> rs;
    for (std::size_t i = 0; i < n; ++i) {
        std::map<std::string, double> scores;
        for (const char* name : {"icc", "clip", "aes"})
            if (u(rng) >= missing_rate) scores[name] = grid(rng) / 20.0;
        rs.push_back(record("r" + std::to_string(i * 7919 % 100003), testutil::random_caption(rng, 4), scores));
    }
    return rs;
}

std::vector<fs::path> write_shards(const std::vector<CaptionRecord>& rs, std::size_t size, const fs::path& dir) {
    VectorSource src(rs);
    const auto m = shard(src, size, dir);
    return {m.shard_paths.begin(), m.shard_paths.end()};
}

std::vector<CaptionRecord> run_shards(const std::vector<fs::path>& shards, const SelectionSpec& spec,
                                      std::size_t workers, SelectionReport* report = nullptr,
                                      ReadMode mode = ReadMode::strict) {
    std::vector<CaptionRecord> out;
    auto rep = select_shards(shards, spec, mode, workers, [&](CaptionRecord&& r) { out.push_back(std::move(r)); });
    if (report) *report = rep;
    return out;
}

} // namespace

TEST(Select, TopKExample) {
    const std::vector<CaptionRecord> rs{record("a", "x", {{"icc", 0.9}}), record("b", "x", {{"icc", 0.1}}),
                                        record("c", "x", {{"icc", 0.5}})};
    EXPECT_EQ(oracle::ids(select(rs, top_k("icc", 2))), (std::vector<std::string>{"a", "c"}));
}

TEST(Select, TopKTieBreaksOnId) {
    const std::vector<CaptionRecord> rs{record("b", "x", {{"icc", 0.5}}), record("a", "x", {{"icc", 0.5}})};
    EXPECT_EQ(oracle::ids(select(rs, top_k("icc", 1))), (std::vector<std::string>{"a"}));
}

TEST(Select, ThresholdIsInclusive) {
    const std::vector<CaptionRecord> rs{record("a", "x", {{"icc", 0.5}}), record("b", "x", {{"icc", 0.4999}}),
                                        record("c", "x", {{"icc", 0.7}})};
    EXPECT_EQ(oracle::ids(select(rs, threshold("icc", 0.5))), (std::vector<std::string>{"a", "c"}));
}

TEST(Select, NestedPrefilterExample) {
    const std::vector<CaptionRecord> rs{
        record("a", "x", {{"clip", 0.9}, {"icc", 0.2}}), record("b", "x", {{"clip", 0.8}, {"icc", 0.9}}),
        record("c", "x", {{"clip", 0.7}, {"icc", 0.8}}), record("d", "x", {{"clip", 0.1}, {"icc", 1.0}}),
        record("e", "x", {{"clip", 0.6}, {"icc", 0.1}}), record("f", "x", {{"clip", 0.5}, {"icc", 0.7}})};
    const auto spec = top_k("icc", 2, share(top_k("clip", 4)));
    // clip top-4 = {a,b,c,e}; icc top-2 of those = {b,c}.
    EXPECT_EQ(oracle::ids(select(rs, spec)), (std::vector<std::string>{"b", "c"}));
}

TEST(Select, OverlargeKWarns) {
    const std::vector<CaptionRecord> rs{record("a", "x", {{"icc", 0.9}}), record("b", "x", {{"icc", 0.1}}),
                                        record("c", "x", {{"icc", 0.5}})};
    SelectionReport rep;
    const auto out = select(rs, top_k("icc", 5), ReadMode::strict, &rep);
    EXPECT_EQ(oracle::ids(out), (std::vector<std::string>{"a", "b", "c"}));
    ASSERT_EQ(rep.warnings.size(), 1u);
    EXPECT_NE(rep.warnings[0].find("5"), std::string::npos);
}

TEST(Select, EmptyAndZero) {
    EXPECT_TRUE(select({}, top_k("icc", 3)).empty());
    const std::vector<CaptionRecord> rs{record("a", "x", {{"icc", 0.9}})};
    EXPECT_THROW(select(rs, top_k("icc", 0)), Error);
    EXPECT_THROW(select(rs, random_k(0, 1)), Error);
}

TEST(Select, MissingScoreStrictAndLenient) {
    const std::vector<CaptionRecord> rs{record("a", "x", {{"icc", 0.9}}), record("b", "x", {{"clip", 0.1}})};
    EXPECT_THROW(select(rs, top_k("icc", 2)), MissingScoreError);
    EXPECT_THROW(select(rs, threshold("icc", 0.0)), MissingScoreError);
    SelectionReport rep;
    EXPECT_EQ(oracle::ids(select(rs, top_k("icc", 2), ReadMode::lenient, &rep)), (std::vector<std::string>{"a"}));
    EXPECT_EQ(rep.skipped_missing, 1u);
    // Random selection reads no score.
    EXPECT_EQ(select(rs, random_k(2, 9)).size(), 2u);
}

TEST(Select, InvalidSpecs) {
    const std::vector<CaptionRecord> rs{record("a", "x", {{"icc", 0.9}})};
    SelectionSpec no_k;
    no_k.score_name = "icc";
    EXPECT_THROW(select(rs, no_k), Error);
    SelectionSpec no_theta;
    no_theta.method = SelectionMethod::threshold;
    no_theta.score_name = "icc";
    EXPECT_THROW(select(rs, no_theta), Error);
    SelectionSpec no_seed;
    no_seed.method = SelectionMethod::random;
    no_seed.k = 1;
    EXPECT_THROW(select(rs, no_seed), Error);
    EXPECT_THROW(select(rs, top_k("", 1)), Error);
}

TEST(Select, RandomIsSeededAndReproducible) {
    std::mt19937_64 rng(40);
    const auto rs = random_corpus(rng, 500);
    const auto a = select(rs, random_k(50, 7));
    const auto b = select(rs, random_k(50, 7));
    const auto c = select(rs, random_k(50, 8));
    EXPECT_EQ(a.size(), 50u);
    EXPECT_EQ(oracle::ids(a), oracle::ids(b));
    EXPECT_NE(oracle::ids(a), oracle::ids(c));
    EXPECT_EQ(oracle::ids(a), oracle::ids(oracle_random(rs, 50, 7)));
}

TEST(Select, RandomInclusionIsRoughlyUniform) {
    std::vector<CaptionRecord> rs;
    for (int i = 0; i < 100; ++i) rs.push_back(record("id" + std::to_string(i), "x"));
    std::vector<int> hits(100, 0);
    constexpr int trials = 2000;
    for (int seed = 0; seed < trials; ++seed)
        for (const auto& r : select(rs, random_k(10, static_cast<std::uint64_t>(seed))))
            ++hits[static_cast<std::size_t>(std::stoi(r.id.substr(2)))];
    // Expected 200 hits each; binomial sd ~13.4.
    for (int h : hits) {
        EXPECT_GT(h, 140);
        EXPECT_LT(h, 260);
    }
}

TEST(SelectProperty, MatchesBruteForce) {
    std::mt19937_64 rng(41);
    std::uniform_int_distribution<std::size_t> size(0, 1000), kk(1, 300);
    std::uniform_int_distribution<int> grid(0, 20);
    for (int trial = 0; trial < 60; ++trial) {
        const auto rs = random_corpus(rng, size(rng));
        const std::size_t k1 = kk(rng), k2 = kk(rng);
        const double th = grid(rng) / 20.0;
        const auto seed = rng();

        ASSERT_EQ(oracle::ids(select(rs, top_k("icc", k1))), oracle::ids(oracle::top_k(rs, "icc", k1)));
        ASSERT_EQ(oracle::ids(select(rs, threshold("icc", th))), oracle::ids(oracle::threshold(rs, "icc", th)));
        ASSERT_EQ(oracle::ids(select(rs, random_k(k1, seed))), oracle::ids(oracle_random(rs, k1, seed)));

        const auto nested = top_k("icc", k2, share(threshold("aes", th, share(top_k("clip", k1)))));
        const auto expect = oracle::top_k(oracle::threshold(oracle::top_k(rs, "clip", k1), "aes", th), "icc", k2);
        ASSERT_EQ(oracle::ids(select(rs, nested)), oracle::ids(expect));

        const auto rnd_nested = threshold("icc", th, share(random_k(k1, seed, share(top_k("clip", k2)))));
        const auto rnd_expect = oracle::threshold(oracle_random(oracle::top_k(rs, "clip", k2), k1, seed), "icc", th);
        ASSERT_EQ(oracle::ids(select(rs, rnd_nested)), oracle::ids(rnd_expect));
    }
}

TEST(SelectProperty, SubsetAndSizeBounds) {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 30; ++trial) {
        const auto rs = random_corpus(rng, 300);
        const std::size_t k = 1 + rng() % 400;
        const auto out = select(rs, top_k("icc", k));
        EXPECT_EQ(out.size(), std::min(k, rs.size()));
        std::set<std::string> all;
        for (const auto& r : rs) all.insert(r.id);
        for (const auto& r : out) EXPECT_TRUE(all.count(r.id));
    }
}

TEST(SelectShards, WorkerCountDoesNotChangeOutput) {
    std::mt19937_64 rng(43);
    const auto rs = random_corpus(rng, 2500);
    testutil::TempDir dir;
    const auto shards = write_shards(rs, 317, dir.path());
    const std::vector<SelectionSpec> specs{
        top_k("icc", 400),
        threshold("icc", 0.6),
        random_k(123, 99),
        top_k("icc", 150, share(threshold("aes", 0.3, share(top_k("clip", 900))))),
    };
    for (const auto& spec : specs) {
        const auto expect = oracle::ids(select(rs, spec));
        for (std::size_t w : {1u, 4u, 8u}) {
            SelectionReport rep;
            EXPECT_EQ(oracle::ids(run_shards(shards, spec, w, &rep)), expect) << "workers=" << w;
            EXPECT_EQ(rep.scanned, rs.size());
            EXPECT_EQ(rep.selected, expect.size());
        }
    }
}

TEST(SelectShards, LenientMissingCountedAcrossWorkers) {
    std::mt19937_64 rng(44);
    const auto rs = random_corpus(rng, 1200, 0.2);
    testutil::TempDir dir;
    const auto shards = write_shards(rs, 100, dir.path());
    SelectionReport r1, r8;
    const auto a = run_shards(shards, top_k("icc", 200), 1, &r1, ReadMode::lenient);
    const auto b = run_shards(shards, top_k("icc", 200), 8, &r8, ReadMode::lenient);
    EXPECT_EQ(oracle::ids(a), oracle::ids(b));
    EXPECT_EQ(oracle::ids(a), oracle::ids(oracle::top_k(rs, "icc", 200)));
    EXPECT_EQ(r1.skipped_missing, r8.skipped_missing);
    EXPECT_GT(r1.skipped_missing, 0u);
    EXPECT_THROW(run_shards(shards, top_k("icc", 200), 4), MissingScoreError);
}

TEST(SelectionSpecIo, JsonRoundTrip) {
    testutil::TempDir dir;
    const auto spec = top_k("icc", 10, share(random_k(100, 5, share(threshold("clip", 0.25)))));
    {
        std::ofstream(dir / "spec.json") << to_json(spec).dump(2);
    }
    const auto back = load_selection_spec(dir / "spec.json");
    EXPECT_EQ(to_json(back).dump(), to_json(spec).dump());
    EXPECT_THROW(selection_spec_from_json(json::parse(R"({"method":"best","score":"icc","k":1})")), Error);
}

TEST(PlanEpochs, FixedStepBudget) {
    const TrainingBudget budget{1000, 1000, 2000};
    const auto full = plan_epochs(budget, 1000);
    EXPECT_EQ(full.steps, 1000u);
    EXPECT_DOUBLE_EQ(full.epochs, 2000.0);
    const auto one = plan_epochs(budget, 2'000'000);
    EXPECT_DOUBLE_EQ(one.epochs, 1.0);
    const auto all = plan_epochs(TrainingBudget{1, 37, 64}, 1);
    EXPECT_DOUBLE_EQ(all.epochs, 37.0 * 64.0);
    EXPECT_THROW(plan_epochs(budget, 0), Error);
    EXPECT_THROW(plan_epochs(TrainingBudget{1, 0, 1}, 5), Error);
}

TEST(EmitDistillation, ProbabilityAndLogitTargets) {
    testutil::TempDir dir;
    const std::vector<CaptionRecord> rs{record("s", "small flock of sheep", {{"icc", 0.9968}}),
                                        record("b", "keep an eye on the ball", {{"icc", 0.0262}})};
    VectorSource p(rs);
    const auto st = emit_distillation_set(p, "icc", TargetSpace::probability, dir / "p.jsonl");
    EXPECT_EQ(st.emitted, 2u);
    std::ifstream in(dir / "p.jsonl");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, R"({"caption":"small flock of sheep","target":0.9968})");
    const auto meta = json::parse(std::ifstream(dir / "p.jsonl.meta.json"));
    EXPECT_EQ(meta.at("target_space"), "probability");
    EXPECT_EQ(meta.at("target_score"), "icc");
    EXPECT_EQ(meta.at("count"), 2);

    VectorSource l(rs);
    emit_distillation_set(l, "icc", TargetSpace::logit, dir / "l.jsonl");
    std::ifstream lin(dir / "l.jsonl");
    std::getline(lin, line);
    EXPECT_NEAR(json::parse(line).at("target").get<double>(), 5.741399338227508, 1e-9);
    EXPECT_EQ(json::parse(std::ifstream(dir / "l.jsonl.meta.json")).at("target_space"), "logit");
}

TEST(EmitDistillation, EmptyInputAndEdgeTargets) {
    testutil::TempDir dir;
    const std::vector<CaptionRecord> none;
    VectorSource e(none);
    EXPECT_EQ(emit_distillation_set(e, "icc", TargetSpace::probability, dir / "e.jsonl").emitted, 0u);
    EXPECT_EQ(fs::file_size(dir / "e.jsonl"), 0u);
    EXPECT_EQ(json::parse(std::ifstream(dir / "e.jsonl.meta.json")).at("count"), 0);

    const std::vector<CaptionRecord> one{record("z", "x", {{"icc", 1.0}})};
    VectorSource z(one);
    EXPECT_THROW(emit_distillation_set(z, "icc", TargetSpace::logit, dir / "z.jsonl"), Error);
}

TEST(Split, SizesByLargestRemainder) {
    const std::vector<double> f{0.8, 0.2};
    EXPECT_EQ(split_sizes(595, f), (std::vector<std::size_t>{476, 119}));
    const std::vector<double> thirds{1.0 / 3, 1.0 / 3, 1.0 / 3};
    const auto s = split_sizes(10, thirds);
    EXPECT_EQ(std::accumulate(s.begin(), s.end(), std::size_t{0}), 10u);
    const std::vector<double> partial{0.5};
    EXPECT_EQ(split_sizes(9, partial), (std::vector<std::size_t>{4}));
    const std::vector<double> bad{0.7, 0.7};
    EXPECT_THROW(split_sizes(10, bad), Error);
}

TEST(Split, IdentityAndDeterminism) {
    std::mt19937_64 rng(45);
    const auto rs = random_corpus(rng, 595);
    const std::vector<double> whole{1.0};
    const auto parts = split_corpus(rs, whole, 3);
    ASSERT_EQ(parts.size(), 1u);
    EXPECT_EQ(oracle::ids(parts[0]), oracle::ids(rs));

    const std::vector<double> f{0.8, 0.2};
    const auto a = split_corpus(rs, f, 11);
    const auto b = split_corpus(rs, f, 11);
    const auto c = split_corpus(rs, f, 12);
    EXPECT_EQ(a[0].size(), 476u);
    EXPECT_EQ(a[1].size(), 119u);
    EXPECT_EQ(oracle::ids(a[1]), oracle::ids(b[1]));
    EXPECT_NE(oracle::ids(a[1]), oracle::ids(c[1]));

    std::multiset<std::string> uni;
    for (const auto& p : a)
        for (const auto& r : p) uni.insert(r.id);
    std::multiset<std::string> all;
    for (const auto& r : rs) all.insert(r.id);
    EXPECT_EQ(uni, all);
}
