#include <fstream>

#include <gtest/gtest.h>

#include "fairqueue/harness.hpp"
#include "temp_dir.hpp"

using namespace fairqueue;
using fairqueue::testing::TempDir;

namespace {

template <typename F>
void expect_error(F&& f, ErrorKind kind) {
    try {
        f();
        FAIL() << "expected " << to_string(kind);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), kind) << e.what();
    }
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint64_t> seed_range(std::uint64_t n, std::uint64_t base = 0) {
    std::vector<std::uint64_t> s;
    for (std::uint64_t i = 0; i < n; ++i) s.push_back(base + i);
    return s;
}

RunConfig run_config(std::size_t n) {
    RunConfig rc;
    rc.seeds = seed_range(n);
    rc.has_seeds = true;
    return rc;
}

}  // namespace

TEST(Generate, DeterministicAcrossRunsAndManifestRerun) {
    TempDir a("gen"), b("gen");
    const auto rc = run_config(6);
    const auto out = cmd_generate(rc, ".", a.path(), true);
    cmd_generate(rc, ".", b / "x", false);
    EXPECT_EQ(slurp(a / "images.fqem"), slurp(b / "x/images.fqem"));
    EXPECT_EQ(out.manifest.at("schedule").at("n_switch"), 10);
    EXPECT_TRUE(fs::exists(a / "attention/5.fqat"));

    const auto manifest = read_json_file(a / "manifest.json");
    const auto again = parse_run_config(manifest);
    cmd_generate(again, ".", b / "rerun", false);
    EXPECT_EQ(slurp(a / "images.fqem"), slurp(b / "rerun/images.fqem"));
    EXPECT_EQ(slurp(a / "samples.csv"), slurp(b / "rerun/samples.csv"));
}

TEST(Generate, SharedInitialStateAcrossSchedules) {
    const World w{WorldConfig{}};
    ScheduleSpec fq, hard;
    hard.kind = ScheduleKind::Constant;
    hard.stage1_prompt = "hard";
    const auto a = generate_samples(w, fq, seed_range(8));
    const auto b = generate_samples(w, hard, seed_range(8));
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(a[i].initial, b[i].initial);
        EXPECT_EQ(a[i].category, i % 2);
    }
}

TEST(Generate, EmptySeedsIsConfigError) {
    TempDir d("gen");
    expect_error([&] { cmd_generate(RunConfig{}, ".", d.path(), false); }, ErrorKind::Config);
}

TEST(Switch, FullFirstStageLeavesSecondEmpty) {
    TempDir d("sw");
    const auto out = cmd_switch(WorldConfig{}, ".", "i2h", 50, seed_range(3), d.path());
    ASSERT_EQ(out.stages.size(), 1u);
    EXPECT_EQ(out.stages[0].stage, "stage1");
    EXPECT_TRUE(fs::exists(d / "maps_stage1.fqem"));
    EXPECT_FALSE(fs::exists(d / "maps_stage2.fqem"));
    expect_error([&] { cmd_switch(WorldConfig{}, ".", "x2y", 10, seed_range(1), d / "bad"); }, ErrorKind::Config);
}

TEST(Switch, StagesSumToFullTrajectory) {
    TempDir d("sw");
    const auto out = cmd_switch(WorldConfig{}, ".", "h2i", 10, seed_range(3), d.path());
    ASSERT_EQ(out.stages.size(), 2u);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& s = out.samples[i];
        const auto& s1 = out.stages[0].samples[i];
        const auto& s2 = out.stages[1].samples[i];
        // Base tokens exist in both stages; the attribute tokens differ.
        EXPECT_EQ(s1.tsa.size(), 1u);
        EXPECT_EQ(s2.tsa.size(), 3u);
        ASSERT_EQ(s1.non_tsa.size(), 5u);
        ASSERT_EQ(s2.non_tsa.size(), 5u);
        for (std::size_t t = 0; t < 5; ++t) {
            const auto full = accumulate(s.records, t, {0, 50}, 64, 64);
            for (std::size_t c = 0; c < full.grid.size(); c += 31)
                EXPECT_NEAR(full.grid.values[c], s1.non_tsa[t].grid.values[c] + s2.non_tsa[t].grid.values[c], 1e-9);
        }
    }
    const auto header = slurp(d / "abnormality.csv").substr(0, 45);
    EXPECT_EQ(header, "sample_id,token_label,stage,metric_name,value");
    const auto maps = fqem::read(d / "maps_stage2.fqem");
    EXPECT_EQ(maps.dim(), 64u * 64u);
    EXPECT_EQ(maps.labels.front().substr(0, 9), "0|stage2|");
}

TEST(Ablate, DedupAndGridSize) {
    std::vector<AblationSetting> in{{1.0, 0.2, 10}, {1.0, 0.2, 10}, {2.0, 0.2, 10}};
    EXPECT_EQ(dedup_settings(in).size(), 2u);

    const World w{WorldConfig{}};
    std::vector<double> cs;
    for (int c = 0; c <= 12; ++c) cs.push_back(c);
    const auto rows = run_ablation(w, cs, {0.0, 0.1, 0.2, 0.3}, seed_range(4));
    EXPECT_EQ(rows.size(), 52u);
    for (const auto& r : rows) {
        EXPECT_GE(r.fd, 0.0);
        EXPECT_EQ(r.expression.size(), 4u);
    }
}

TEST(Ablate, SharedSwitchStepReusesRun) {
    const World w{WorldConfig{}};
    // 0.2 and 0.205 both round to step 10.
    const auto rows = run_ablation(w, {5.0}, {0.2, 0.205}, seed_range(4));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].expression, rows[1].expression);
    EXPECT_EQ(rows[1].setting.fraction, 0.205);
}

TEST(Evaluate, BalancedToySetHasSmallFd) {
    TempDir d("ev");
    RunConfig rc = run_config(500);
    cmd_generate(rc, ".", d / "gen", false);
    const auto out = cmd_evaluate(json::parse(R"({"images":"gen/images.fqem","classifier":{"kind":"toy"}})"), d.path(),
                                  d / "eval");
    EXPECT_LT(out.metrics.at("FD").get<double>(), 0.05);
    EXPECT_TRUE(out.metrics.at("FID").is_null());
    EXPECT_TRUE(fs::exists(d / "eval/per_sample.csv"));
}

TEST(Evaluate, IdenticalFeaturesAndExternalScores) {
    TempDir d("ev");
    Matrix m(40, 5);
    SeededRng rng(3, 3);
    for (double& v : m.data) v = rng.normal();
    std::vector<std::string> ids;
    for (int i = 0; i < 40; ++i) ids.push_back("s" + std::to_string(i));
    fqem::write(d / "f.fqem", EmbeddingMatrix(m, ids));
    {
        std::ofstream p(d / "pred.csv");
        p << "sample_id,category\n";
        for (int i = 0; i < 40; ++i) p << "s" << i << ',' << i % 2 << '\n';
        std::ofstream s(d / "ds.csv");
        s << "sample_id,score\na,0.2\nb,0.4\n";
    }
    const auto j = json::parse(
        R"({"features":"f.fqem","reference_features":"f.fqem","classifier":{"kind":"predictions","path":"pred.csv"}})");
    const auto out = cmd_evaluate(j, d.path(), d / "o1");
    EXPECT_LT(out.metrics.at("FID").get<double>(), 1e-6);
    EXPECT_NEAR(out.metrics.at("DS").get<double>(), 0.0, 1e-12);
    EXPECT_EQ(out.metrics.at("FD").get<double>(), 0.0);

    auto j2 = j;
    j2["ds_scores"] = "ds.csv";
    EXPECT_NEAR(cmd_evaluate(j2, d.path(), d / "o2").metrics.at("DS").get<double>(), 0.3, 1e-15);

    auto j3 = j;
    j3.erase("classifier");
    expect_error([&] { cmd_evaluate(j3, d.path(), d / "o3"); }, ErrorKind::Config);
}

TEST(LearnTokens, ZeroIterationsWritesSingleTraceRow) {
    TempDir d("lt");
    const auto j = json::parse(R"({"refs":{"synthetic":{"categories":2,"per_category":20,"seed":1}},"iters":0,
                                  "hard_prompts":["smiling","frowning"]})");
    const auto out = cmd_learn_tokens(j, d.path(), d / "out");
    EXPECT_EQ(out.result.loss_trace.size(), 1u);
    const auto trace = slurp(d / "out/loss_trace.csv");
    EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 2);
    EXPECT_TRUE(fs::exists(d / "out/tokens_1.fqem"));
    EXPECT_TRUE(fs::exists(d / "out/direction_report.csv"));
}

TEST(LearnTokens, CorruptReferenceNamesFile) {
    TempDir d("lt");
    {
        std::ofstream bad(d / "refs0.fqem", std::ios::binary);
        bad << "NOPE0000000000000000";
    }
    fqem::write(d / "refs1.fqem", EmbeddingMatrix(Matrix(4, 8, std::vector<double>(32, 1.0))));
    try {
        cmd_learn_tokens(json::parse(R"({"refs":["refs0.fqem","refs1.fqem"]})"), d.path(), d / "out");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Format);
        EXPECT_NE(std::string(e.what()).find("refs0.fqem"), std::string::npos);
    }
}
