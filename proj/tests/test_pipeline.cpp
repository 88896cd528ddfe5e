#include <gtest/gtest.h>

#include <t2p/pipeline.hpp>

#include "test_support.hpp"
#include "tiny_workspace.hpp"

using namespace t2p;
using t2p::testing::tiny_config;
using t2p::testing::trained;

namespace {

std::string read(const std::filesystem::path& p) { return read_text_file(p); }

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

void expect_same_files(const std::filesystem::path& a, const std::filesystem::path& b,
                       const std::vector<std::string>& skip = {}) {
    std::size_t n = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(e.path(), a);
        if (std::find(skip.begin(), skip.end(), rel.filename().string()) != skip.end()) continue;
        ASSERT_TRUE(std::filesystem::exists(b / rel)) << rel;
        EXPECT_EQ(read(e.path()), read(b / rel)) << rel;
        ++n;
    }
    EXPECT_GT(n, 0u);
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndDefaults) {
    const RunConfig c = tiny_config();
    const nlohmann::json j = c;
    EXPECT_EQ(nlohmann::json(j.get<RunConfig>()).dump(), j.dump());
    const RunConfig d = nlohmann::json::object().get<RunConfig>();
    EXPECT_EQ(d.resolution, 32);
    EXPECT_EQ(d.evolution.alpha, 0.8);
    EXPECT_EQ(d.finetune.period, 10);
    const auto path = t2p::testing::scratch_dir("cfg") / "bad.json";
    write_text_file(path, "{\"resolution\": \"big\"}");
    EXPECT_THROW(load_run_config(path), ParseError);
}

TEST(Workspace, DerivesModelWidthsAndChecksResolution) {
    const auto dir = t2p::testing::scratch_dir("ws_dims");
    const Workspace ws = open_workspace(tiny_config(), dir, false);
    EXPECT_EQ(ws.config.imitator.input_dim, 24u);
    EXPECT_EQ(ws.config.translator.output_dim, 24u);
    EXPECT_EQ(ws.config.translator.embed_dim, 8u);
    RunConfig bad = tiny_config();
    bad.resolution = 16;
    EXPECT_THROW(open_workspace(bad, dir, false), ValidationError);
    RunConfig remote_kind = tiny_config();
    remote_kind.backend.kind = "quantum";
    EXPECT_THROW(open_workspace(remote_kind, dir, false), ValidationError);
}

TEST(GenData, TwiceGivesIdenticalDirectories) {
    const auto a = t2p::testing::scratch_dir("gen_a"), b = t2p::testing::scratch_dir("gen_b");
    for (const auto& dir : {a, b}) {
        const Workspace ws = open_workspace(tiny_config(), dir, false);
        write_manifest(ws.dataset_dir(), ws.config, "gen-data");
        gen_data(ws);
    }
    expect_same_files(a, b);
    EXPECT_TRUE(std::filesystem::exists(a / "dataset" / "run_manifest.json"));
}

TEST(GenData, MissingDatasetNamesPath) {
    const auto dir = t2p::testing::scratch_dir("no_data");
    const Workspace ws = open_workspace(tiny_config(), dir, false);
    try {
        load_workspace_dataset(ws);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find((dir / "dataset" / "manifest.json").string()), std::string::npos)
            << e.what();
    }
}

TEST(Training, WritesModelsHistoryAndReports) {
    const auto& ws = trained();
    ASSERT_TRUE(ws.imitator && ws.translator);
    EXPECT_EQ(line_count(read(ws.imitator_dir() / "history.csv")), 1u + 4u);
    EXPECT_EQ(line_count(read(ws.translator_dir() / "history.csv")), 1u + 5u);
    const auto rep = nlohmann::json::parse(read(ws.translator_dir() / "report.json"));
    EXPECT_GT(rep.at("baseline_l1").get<double>(), 0.0);
    EXPECT_FALSE(rep.contains("seconds"));
}

TEST(Create, MissingModelsNameTheDirectory) {
    const auto dir = t2p::testing::scratch_dir("no_models");
    const Workspace ws = open_workspace(tiny_config(), dir);
    try {
        create(ws, "target:1", CreateMode::fixed);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find((dir / "translator").string()), std::string::npos);
    }
    EXPECT_NO_THROW(create(ws, "target:1", CreateMode::evolution));
    EXPECT_THROW(create(ws, "", CreateMode::evolution), ValidationError);
    EXPECT_THROW(parse_mode("fast"), ParseError);
    EXPECT_EQ(parse_mode("translator"), CreateMode::translator);
}

TEST(Create, FixedModeIsThePretrainedPrediction) {
    const auto& ws = trained();
    const auto r = create(ws, "a face target:3", CreateMode::fixed);
    auto expect = predict(*ws.translator, embed_prompt(*ws.backend, "a face target:3").front);
    for (double& v : expect) v = std::clamp(v, 0.0, 1.0);
    EXPECT_EQ(r.params.continuous, expect);
    for (int d : r.params.discrete) EXPECT_EQ(d, 0);
    EXPECT_TRUE(r.finetune.empty());
    EXPECT_TRUE(r.evolution.empty());
    ASSERT_EQ(r.metrics.size(), 1u);
    EXPECT_EQ(r.metrics[0].phase, "predict");
}

TEST(Create, TranslatorModeKeepsDiscreteAtZero) {
    const auto& ws = trained();
    const auto r = create(ws, "a face target:4", CreateMode::translator);
    for (int d : r.params.discrete) EXPECT_EQ(d, 0);
    EXPECT_FALSE(r.finetune.empty());
    EXPECT_TRUE(r.evolution.empty());
    EXPECT_FALSE(r.snapshots.empty());
    const auto pe = embed_prompt(*ws.backend, "a face target:4");
    EXPECT_NEAR(r.score, clip_score(*ws.backend, pe, r.params, ws.layout, 0.8, 8), 1e-12);
}

TEST(Create, FullModeEvolvesFromSnapshotsWithMonotoneBest) {
    const auto& ws = trained();
    std::vector<double> best;
    const auto r = create(ws, "a face target:5", CreateMode::full, [&](const CreateEvent& e) { best.push_back(e.best_score); });
    for (std::size_t i = 1; i < best.size(); ++i) EXPECT_GE(best[i], best[i - 1]);
    ASSERT_FALSE(r.evolution.empty());
    EXPECT_EQ(r.evolution.size(), 7u);
    EXPECT_EQ(r.score, r.evolution.back().best_score);
    for (const auto& s : r.snapshots) {
        const double sc = clip_score(*ws.backend, embed_prompt(*ws.backend, "a face target:5"),
                                     detail::with_zero_discrete(ws.schema, s.continuous), ws.layout, 0.8, 8);
        EXPECT_GE(r.score, sc);
    }
}

TEST(Create, RepeatRunsWriteIdenticalArtifacts) {
    const auto& ws = trained();
    const auto a = t2p::testing::scratch_dir("create_a"), b = t2p::testing::scratch_dir("create_b");
    write_creation(ws, create(ws, "a face target:6", CreateMode::full), a);
    write_creation(ws, create(ws, "a face target:6", CreateMode::full), b);
    expect_same_files(a, b, {"timing.json"});
    for (const char* f : {"params.json", "front.ppm", "side.ppm", "metrics.csv", "finetune.csv", "evolution.csv"})
        EXPECT_TRUE(std::filesystem::exists(a / f)) << f;
}

TEST(Create, BudgetCapsTheRun) {
    const auto dir = t2p::testing::scratch_dir("budget");
    RunConfig c = tiny_config();
    c.budget_seconds = 0.2;
    c.evolution.max_generations = 1000000;
    c.evolution.epsilon = -1.0;
    const Workspace ws = open_workspace(c, dir);
    const auto r = create(ws, "target:2", CreateMode::evolution);
    EXPECT_LT(r.seconds, 5.0);
    EXPECT_GE(r.evolution.size(), 2u);
}

TEST(Interpolation, EndpointsMidpointAndRenders) {
    const auto& ws = trained();
    Rng rng(3);
    const auto a = sample_uniform(ws.schema, rng), b = sample_uniform(ws.schema, rng);
    const auto one = interpolation_frames(a, b, 1);
    ASSERT_EQ(one.size(), 2u);
    EXPECT_EQ(one[0], a);
    EXPECT_EQ(one[1], b);
    const auto two = interpolation_frames(a, b, 2);
    for (std::size_t i = 0; i < a.continuous.size(); ++i)
        EXPECT_NEAR(two[1].continuous[i], 0.5 * (a.continuous[i] + b.continuous[i]), 1e-12);
    const auto out = t2p::testing::scratch_dir("interp");
    write_interpolation(ws, two, out);
    EXPECT_EQ(read(out / "frame_000.ppm"), encode_ppm(render_front(a, ws.layout, 8)));
    EXPECT_EQ(read(out / "frame_002.ppm"), encode_ppm(render_front(b, ws.layout, 8)));
    EXPECT_EQ(load_params(out / "frame_002.json"), b);
    EXPECT_THROW(interpolation_frames(a, b, 0), ValidationError);
}

TEST(Ablation, ReportStatistics) {
    AblationReport rep;
    rep.modes = {CreateMode::full, CreateMode::fixed};
    rep.rows = {{"p1", {0.9, 0.5}}, {"p2", {0.7, 0.7}}, {"p3", {0.5, 0.6}}};
    EXPECT_NEAR(rep.mean(0), 0.7, 1e-15);
    EXPECT_NEAR(rep.stddev(0), 0.2, 1e-15);
    EXPECT_NEAR(rep.win_rate(0, 1, false), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(rep.win_rate(0, 1, true), 1.0 / 3.0, 1e-15);
    EXPECT_EQ(rep.index_of(CreateMode::fixed), 1u);
    EXPECT_THROW(rep.index_of(CreateMode::evolution), ValidationError);
    EXPECT_NE(rep.summary_table().find("full        70.00 +- 20.00"), std::string::npos) << rep.summary_table();
    EXPECT_EQ(rep.scores_csv().substr(0, 16), "prompt,full,fixe");
}

TEST(Ablation, RunsEveryModeOnEveryPrompt) {
    const auto& ws = trained();
    const auto prompts = synthetic_prompts(2, 10);
    EXPECT_EQ(prompts[1], "a face target:11");
    const auto rep = ablate(ws, prompts, {CreateMode::fixed, CreateMode::evolution});
    ASSERT_EQ(rep.rows.size(), 2u);
    EXPECT_EQ(rep.rows[0].scores.size(), 2u);
    EXPECT_THROW(ablate(ws, {}, {CreateMode::fixed}), ValidationError);
}
