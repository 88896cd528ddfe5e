#pragma once

// HTTP embedding backend and a matching service that exposes any backend
// over the same protocol.
//
//   GET  /v1/info                               -> {"dim": int}
//   POST /v1/embed_text  {"texts": [...]}       -> {"embeddings": [[...], ...]}
//   POST /v1/embed_image {"ppm_base64": "..."}  -> {"embedding": [...]}
//   non-2xx responses carry {"error": "..."}

#include <chrono>
#include <condition_variable>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "embedder.hpp"
#include "image.hpp"

#include <httplib.h>
#include <json.hpp>
#include <sodium.h>

namespace t2p {

namespace b64 {

inline std::string encode(std::string_view in) {
    std::string out(sodium_base64_ENCODED_LEN(in.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
    sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(in.data()), in.size(),
                      sodium_base64_VARIANT_ORIGINAL);
    out.pop_back();  // trailing NUL
    return out;
}

inline std::string decode(std::string_view in) {
    std::string out(in.size() / 4 * 3 + 3, '\0');
    std::size_t len = 0;
    const char* end = nullptr;
    if (sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), in.data(), in.size(), nullptr, &len,
                          &end, sodium_base64_VARIANT_ORIGINAL) != 0 ||
        end != in.data() + in.size())
        throw ParseError("base64: malformed input");
    out.resize(len);
    return out;
}

}  // namespace b64

struct RemoteConfig {
    std::string host = "127.0.0.1";
    int port = 8600;
    int max_retries = 3;  // attempts after the first
    int backoff_ms = 100;  // doubled after each failed attempt
    std::size_t max_in_flight = 4;
    int timeout_seconds = 30;
};

/// Black-box backend over HTTP. Transport failures and 5xx responses are
/// retried with exponential backoff; 4xx responses fail immediately.
class RemoteEmbedder : public EmbedderBackend {
public:
    explicit RemoteEmbedder(RemoteConfig config) : config_(std::move(config)) {
        if (config_.max_in_flight == 0) throw ValidationError("remote embedder: max_in_flight must be >= 1");
        const auto info = call("GET", "/v1/info", {});
        dim_ = info.at("dim").get<std::size_t>();
        if (dim_ == 0) throw ParseError("remote embedder: server reported dim 0");
    }

    BackendKind kind() const override { return BackendKind::remote; }
    std::size_t dim() const override { return dim_; }
    bool differentiable() const override { return false; }
    const RemoteConfig& config() const { return config_; }

    Embedding embed_text(const std::string& text) const override { return embed_texts({text}).at(0); }

    std::vector<Embedding> embed_texts(const std::vector<std::string>& texts) const override {
        for (const auto& t : texts)
            if (t.empty()) throw ValidationError("embed_text: empty text");
        const auto reply = call("POST", "/v1/embed_text", {{"texts", texts}});
        const auto& arr = reply.at("embeddings");
        if (arr.size() != texts.size())
            throw ParseError("remote embedder: asked for " + std::to_string(texts.size()) + " embeddings, got " +
                             std::to_string(arr.size()));
        std::vector<Embedding> out;
        for (const auto& e : arr) out.push_back(checked(e.get<Embedding>()));
        return out;
    }

    Embedding embed_image(const RasterImage& image) const override {
        const auto reply = call("POST", "/v1/embed_image", {{"ppm_base64", b64::encode(encode_ppm(image))}});
        return checked(reply.at("embedding").get<Embedding>());
    }

    /// Total requests sent, including retries.
    std::size_t requests_sent() const {
        std::lock_guard lock(mu_);
        return sent_;
    }

private:
    Embedding checked(Embedding e) const {
        if (e.size() != dim_)
            throw ParseError("remote embedder: embedding of size " + std::to_string(e.size()) + ", expected " +
                             std::to_string(dim_));
        return normalized(std::move(e));
    }

    nlohmann::json call(const std::string& method, const std::string& path, const nlohmann::json& body) const {
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
            ++in_flight_;
        }
        struct Release {
            const RemoteEmbedder* self;
            ~Release() {
                {
                    std::lock_guard lock(self->mu_);
                    --self->in_flight_;
                }
                self->cv_.notify_one();
            }
        } release{this};

        std::string last_error;
        int backoff = config_.backoff_ms;
        int attempts = 0;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
            ++attempts;
            {
                std::lock_guard lock(mu_);
                ++sent_;
            }
            httplib::Client cli(config_.host, config_.port);
            cli.set_connection_timeout(config_.timeout_seconds, 0);
            cli.set_read_timeout(config_.timeout_seconds, 0);
            const auto res = method == "GET" ? cli.Get(path) : cli.Post(path, body.dump(), "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 200 && res->status < 300) {
                try {
                    return nlohmann::json::parse(res->body);
                } catch (const nlohmann::json::exception& e) {
                    throw ParseError("remote embedder: " + path + " returned malformed JSON: " + e.what());
                }
            }
            std::string detail = res->body;
            try {
                detail = nlohmann::json::parse(res->body).value("error", res->body);
            } catch (const nlohmann::json::exception&) {
            }
            last_error = "HTTP " + std::to_string(res->status) + ": " + detail;
            if (res->status < 500) break;
        }
        throw IoError("remote embedder: " + method + " " + path + " failed after " +
                      std::to_string(attempts) + " attempt(s), " + std::to_string(attempts - 1) +
                      " retries; last error: " + last_error);
    }

    RemoteConfig config_;
    std::size_t dim_ = 0;
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    mutable std::size_t in_flight_ = 0;
    mutable std::size_t sent_ = 0;
};

/// Registers the embedding protocol on `server`, answering from `backend`.
inline void mount_embedding_service(httplib::Server& server, const EmbedderBackend& backend) {
    auto fail = [](httplib::Response& res, int status, const std::string& msg) {
        res.status = status;
        res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    };
    server.Get("/v1/info", [&backend](const httplib::Request&, httplib::Response& res) {
        res.set_content(nlohmann::json{{"dim", backend.dim()}}.dump(), "application/json");
    });
    server.Post("/v1/embed_text", [&backend, fail](const httplib::Request& req, httplib::Response& res) {
        try {
            const auto texts = nlohmann::json::parse(req.body).at("texts").get<std::vector<std::string>>();
            res.set_content(nlohmann::json{{"embeddings", backend.embed_texts(texts)}}.dump(), "application/json");
        } catch (const std::exception& e) {
            fail(res, 400, e.what());
        }
    });
    server.Post("/v1/embed_image", [&backend, fail](const httplib::Request& req, httplib::Response& res) {
        try {
            const auto ppm = b64::decode(nlohmann::json::parse(req.body).at("ppm_base64").get<std::string>());
            res.set_content(nlohmann::json{{"embedding", backend.embed_image(decode_ppm(ppm))}}.dump(),
                            "application/json");
        } catch (const std::exception& e) {
            fail(res, 400, e.what());
        }
    });
}

}  // namespace t2p
