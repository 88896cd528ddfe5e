#include <gtest/gtest.h>

#include <t2p/server.hpp>

#include "test_support.hpp"
#include "tiny_workspace.hpp"

using namespace t2p;
using t2p::testing::tiny_config;
using t2p::testing::trained;

namespace {

nlohmann::json body_json(const httplib::Result& res) { return nlohmann::json::parse(res->body); }

nlohmann::json poll_until_finished(httplib::Client& cli, const std::string& id, std::vector<nlohmann::json>* polls = nullptr) {
    for (int i = 0; i < 2000; ++i) {
        auto res = cli.Get("/api/jobs/" + id);
        EXPECT_TRUE(res);
        if (!res) break;
        const auto j = body_json(res);
        if (polls) polls->push_back(j);
        const auto status = j.at("status").get<std::string>();
        if (status == "done" || status == "failed") return j;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    ADD_FAILURE() << "job " << id << " did not finish";
    return {};
}

std::string params_body(const FacialParams& p, const std::string& view = "front") {
    return nlohmann::json{{"params", nlohmann::json::parse(serialize_params(p))}, {"view", view}}.dump();
}

}  // namespace

TEST(Server, JobLifecycleWithMonotoneBestScore) {
    const auto& ws = trained();
    JobServer server(ws);
    httplib::Client cli("127.0.0.1", server.start());
    auto res = cli.Post("/api/jobs", R"({"prompt": "a face target:3", "mode": "full"})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 202);
    const std::string id = body_json(res).at("job_id");
    std::vector<nlohmann::json> polls;
    const auto final = poll_until_finished(cli, id, &polls);
    ASSERT_EQ(final.at("status"), "done") << final.dump();
    const std::vector<std::string> order = {"queued", "running", "done"};
    std::size_t last = 0;
    double best = -1.0;
    for (const auto& p : polls) {
        const auto at = std::find(order.begin(), order.end(), p.at("status").get<std::string>()) - order.begin();
        EXPECT_GE(static_cast<std::size_t>(at), last);
        last = static_cast<std::size_t>(at);
        EXPECT_GE(p.at("best_score").get<double>(), best);
        best = p.at("best_score").get<double>();
    }
    EXPECT_EQ(final.at("result").at("score").get<double>(), final.at("best_score").get<double>());
    const auto job = server.job(id);
    ASSERT_TRUE(job && job->result);
    EXPECT_EQ(job->result->score, final.at("result").at("score").get<double>());

    auto curve = cli.Get("/api/jobs/" + id + "/curve");
    ASSERT_TRUE(curve);
    EXPECT_EQ(curve->body.substr(0, 17), "step,phase,score\n");
    EXPECT_NE(curve->body.find(",evolution,"), std::string::npos);
}

TEST(Server, PollsAnswerWhileAJobComputes) {
    RunConfig cfg = tiny_config();
    cfg.evolution.max_generations = 100000;
    cfg.evolution.epsilon = -1.0;
    cfg.budget_seconds = 3.0;
    const Workspace ws = open_workspace(cfg, trained().work_dir);
    JobServer server(ws);
    httplib::Client cli("127.0.0.1", server.start());
    auto res = cli.Post("/api/jobs", R"({"prompt": "target:4", "mode": "evolution"})", "application/json");
    ASSERT_TRUE(res);
    const std::string id = body_json(res).at("job_id");
    while (server.job(id)->status == JobStatus::queued) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    for (int i = 0; i < 5; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        auto r = cli.Get("/api/jobs/" + id);
        ASSERT_TRUE(r);
        EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 0.5);
        EXPECT_EQ(body_json(r).at("status"), "running");
    }
    EXPECT_EQ(poll_until_finished(cli, id).at("status"), "done");
}

TEST(Server, RenderReturnsPngOfTheQuantizedRender) {
    const auto& ws = trained();
    JobServer server(ws);
    httplib::Client cli("127.0.0.1", server.start());
    Rng rng(2);
    const auto p = sample_uniform(ws.schema, rng);
    const httplib::Params query = {{"params", serialize_params(p)}, {"view", "front"}};
    auto res = cli.Get("/api/render", query, httplib::Headers{});
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(decode_png(res->body), decode_ppm(encode_ppm(render_front(p, ws.layout, 8))));

    res = cli.Post("/api/render", params_body(p, "side"), "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(decode_png(res->body), quantized(render_side(p, ws.layout, 8)));
    res = cli.Post("/api/render", params_body(p, "top"), "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    res = cli.Get("/api/render?params=%7Bbad");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    FacialParams bad = p;
    bad.continuous.pop_back();
    res = cli.Post("/api/render", params_body(bad), "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
}

TEST(Server, InterpolateAndSchema) {
    const auto& ws = trained();
    JobServer server(ws);
    httplib::Client cli("127.0.0.1", server.start());
    Rng rng(5);
    const auto a = sample_uniform(ws.schema, rng), b = sample_uniform(ws.schema, rng);
    const nlohmann::json req = {{"a", nlohmann::json::parse(serialize_params(a))},
                                {"b", nlohmann::json::parse(serialize_params(b))},
                                {"steps", 1}};
    auto res = cli.Post("/api/interpolate", req.dump(), "application/json");
    ASSERT_TRUE(res);
    const auto frames = body_json(res).at("frames");
    ASSERT_EQ(frames.size(), 2u);
    EXPECT_EQ(params_from_json(frames[0]), a);
    EXPECT_EQ(params_from_json(frames[1]), b);

    res = cli.Get("/api/schema");
    ASSERT_TRUE(res);
    EXPECT_EQ(body_json(res), schema_to_json(ws.schema));
}

TEST(Server, ErrorsAreJson) {
    const auto& ws = trained();
    JobServer server(ws);
    httplib::Client cli("127.0.0.1", server.start());
    auto res = cli.Get("/api/jobs/job-999");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 404);
    EXPECT_NE(body_json(res).at("error").get<std::string>().find("job-999"), std::string::npos);
    for (const std::string bad : {"{oops", "[1]", R"({"mode": "full"})", R"({"prompt": "x", "mode": "fast"})",
                                  R"({"prompt": ""})"}) {
        res = cli.Post("/api/jobs", bad, "application/json");
        ASSERT_TRUE(res);
        EXPECT_EQ(res->status, 400) << bad;
        EXPECT_TRUE(body_json(res).contains("error"));
    }
    res = cli.Get("/api/nothing");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 404);
    EXPECT_TRUE(body_json(res).contains("error"));
}

TEST(Server, ModelCheckAndJobDirectories) {
    const auto empty = t2p::testing::scratch_dir("server_empty");
    const Workspace bare = open_workspace(tiny_config(), empty);
    const auto jobs = t2p::testing::scratch_dir("server_jobs");
    JobServer server(bare, 1, jobs);
    httplib::Client cli("127.0.0.1", server.start());
    auto res = cli.Post("/api/jobs", R"({"prompt": "target:1", "mode": "full"})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    res = cli.Post("/api/jobs", R"({"prompt": "target:1", "mode": "evolution"})", "application/json");
    ASSERT_TRUE(res);
    const std::string id = body_json(res).at("job_id");
    EXPECT_EQ(poll_until_finished(cli, id).at("status"), "done");
    EXPECT_TRUE(std::filesystem::exists(jobs / id / "params.json"));
}
