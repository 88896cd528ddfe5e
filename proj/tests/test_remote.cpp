#include <gtest/gtest.h>

#include <t2p/remote_embedder.hpp>

#include <atomic>

#include "test_support.hpp"

using namespace t2p;
using t2p::testing::data_path;

namespace {

struct Mini {
    ParamSchema schema = load_schema(data_path("schemas/mini.schema.json"));
    EngineLayout layout = load_layout(data_path("layouts/mini.layout.json"), schema);
    SyntheticEmbedder backend{schema, layout};
};

const Mini& mini() {
    static const Mini m;
    return m;
}

// In-process HTTP server on an ephemeral port.
class LocalServer {
public:
    template <typename Setup>
    explicit LocalServer(Setup setup) {
        setup(server_);
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~LocalServer() {
        server_.stop();
        thread_.join();
    }
    RemoteConfig config() const {
        RemoteConfig c;
        c.port = port_;
        c.backoff_ms = 1;
        c.timeout_seconds = 5;
        return c;
    }

private:
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace

TEST(Base64, RoundTripsAndRejectsGarbage) {
    for (const std::string& s : std::vector<std::string>{"", "a", "ab", "abc", "abcd", std::string("\0\xff\x10", 3)})
        EXPECT_EQ(b64::decode(b64::encode(s)), s);
    EXPECT_EQ(b64::encode("hello"), "aGVsbG8=");
    EXPECT_THROW(b64::decode("a$=="), ParseError);
}

TEST(RemoteEmbedder, MatchesLocalBackendThroughService) {
    const auto& m = mini();
    LocalServer srv([&](httplib::Server& s) { mount_embedding_service(s, m.backend); });
    RemoteEmbedder remote(srv.config());
    EXPECT_EQ(remote.dim(), 64u);
    EXPECT_FALSE(remote.differentiable());
    Rng rng(1);
    const auto img = render_front(sample_uniform(m.schema, rng), m.layout, 32);
    // The image crosses the wire as an 8-bit PPM.
    const auto local = m.backend.embed_image(quantized(img));
    const auto got = remote.embed_image(img);
    for (std::size_t i = 0; i < local.size(); ++i) EXPECT_NEAR(got[i], local[i], 1e-12);
    const auto texts = remote.embed_texts({"a face target:3", "an elf"});
    ASSERT_EQ(texts.size(), 2u);
    EXPECT_NEAR(cosine(texts[0], m.backend.embed_text("a face target:3")), 1.0, 1e-12);
}

TEST(RemoteEmbedder, RetriesServerErrorsThenSucceeds) {
    std::atomic<int> calls{0};
    LocalServer srv([&](httplib::Server& s) {
        s.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"dim": 2})", "application/json");
        });
        s.Post("/v1/embed_text", [&](const httplib::Request&, httplib::Response& res) {
            if (++calls < 3) {
                res.status = 503;
                res.set_content(R"({"error": "busy"})", "application/json");
                return;
            }
            res.set_content(R"({"embeddings": [[3.0, 4.0]]})", "application/json");
        });
    });
    RemoteEmbedder remote(srv.config());
    const auto e = remote.embed_text("x");
    EXPECT_NEAR(e[0], 0.6, 1e-15);
    EXPECT_NEAR(e[1], 0.8, 1e-15);
    EXPECT_EQ(calls.load(), 3);
}

TEST(RemoteEmbedder, GivesUpAfterRetryBudget) {
    std::atomic<int> calls{0};
    LocalServer srv([&](httplib::Server& s) {
        s.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"dim": 2})", "application/json");
        });
        s.Post("/v1/embed_text", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            res.status = 500;
            res.set_content(R"({"error": "down"})", "application/json");
        });
    });
    RemoteEmbedder remote(srv.config());
    try {
        remote.embed_text("x");
        FAIL();
    } catch (const IoError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("4 attempt(s), 3 retries"), std::string::npos) << msg;
        EXPECT_NE(msg.find("down"), std::string::npos);
    }
    EXPECT_EQ(calls.load(), 4);
}

TEST(RemoteEmbedder, ClientErrorsAreNotRetried) {
    std::atomic<int> calls{0};
    LocalServer srv([&](httplib::Server& s) {
        s.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"dim": 2})", "application/json");
        });
        s.Post("/v1/embed_image", [&](const httplib::Request&, httplib::Response& res) {
            ++calls;
            res.status = 422;
            res.set_content(R"({"error": "bad image"})", "application/json");
        });
    });
    RemoteEmbedder remote(srv.config());
    EXPECT_THROW(remote.embed_image(RasterImage(4, 4)), IoError);
    EXPECT_EQ(calls.load(), 1);
}

TEST(RemoteEmbedder, RejectsWrongDimensionAndEmptyText) {
    LocalServer srv([&](httplib::Server& s) {
        s.Get("/v1/info", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"dim": 3})", "application/json");
        });
        s.Post("/v1/embed_text", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"embeddings": [[1.0, 0.0]]})", "application/json");
        });
    });
    RemoteEmbedder remote(srv.config());
    EXPECT_THROW(remote.embed_text("x"), ParseError);
    EXPECT_THROW(remote.embed_text(""), ValidationError);
}

TEST(RemoteEmbedder, UnreachableServerIsIoError) {
    RemoteConfig c;
    c.port = 1;  // nothing listens here
    c.max_retries = 1;
    c.backoff_ms = 1;
    c.timeout_seconds = 1;
    EXPECT_THROW(RemoteEmbedder{c}, IoError);
}

TEST(EmbeddingService, MalformedRequestsGet400) {
    const auto& m = mini();
    LocalServer srv([&](httplib::Server& s) { mount_embedding_service(s, m.backend); });
    httplib::Client cli("127.0.0.1", srv.config().port);
    auto res = cli.Post("/v1/embed_text", "{not json", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    EXPECT_TRUE(nlohmann::json::parse(res->body).contains("error"));
    res = cli.Post("/v1/embed_image", R"({"ppm_base64": "aGVsbG8="})", "application/json");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
}
