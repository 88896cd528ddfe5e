#pragma once

// HTTP job API over a workspace. Jobs run on a small worker pool; every
// handler only touches job state under a short lock, so polls never wait
// on compute.
//
//   POST /api/jobs              {"prompt", "mode"?}         -> 202 {"job_id", "status"}
//   GET  /api/jobs/{id}                                      -> status, best_score, result
//   GET  /api/jobs/{id}/curve                                -> text/csv step,phase,score
//   POST /api/render            {"params", "view"?, "resolution"?} -> image/png
//   GET  /api/render?params=<json>&view=&resolution=      -> image/png
//   POST /api/interpolate       {"a", "b", "steps"}          -> {"frames": [...]}
//   GET  /api/schema                                         -> schema JSON
//   errors carry {"error": "..."}

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pipeline.hpp"

#include <httplib.h>
#include <json.hpp>

namespace t2p {

enum class JobStatus { queued, running, done, failed };

NLOHMANN_JSON_SERIALIZE_ENUM(JobStatus, {{JobStatus::queued, "queued"},
                                         {JobStatus::running, "running"},
                                         {JobStatus::done, "done"},
                                         {JobStatus::failed, "failed"}})

struct Job {
    std::string id;
    std::string prompt;
    CreateMode mode = CreateMode::full;
    JobStatus status = JobStatus::queued;
    double best_score = 0.0;
    std::vector<MetricPoint> curve;
    std::optional<CreationResult> result;
    std::string error;
};

class JobServer {
public:
    /// `jobs_dir`, when set, receives one creation directory per finished job.
    JobServer(const Workspace& ws, std::size_t workers = 1, std::filesystem::path jobs_dir = {})
        : ws_(ws), jobs_dir_(std::move(jobs_dir)) {
        if (workers == 0) throw ValidationError("server: need at least one worker");
        routes();
        for (std::size_t i = 0; i < workers; ++i) workers_.emplace_back([this] { work(); });
    }

    ~JobServer() {
        stop();
        {
            std::lock_guard lock(mu_);
            shutting_down_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    JobServer(const JobServer&) = delete;
    JobServer& operator=(const JobServer&) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    int start(const std::string& host = "127.0.0.1", int port = 0) {
        const int bound = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
        if (bound < 0) throw IoError("server: cannot bind " + host + ":" + std::to_string(port));
        listener_ = std::thread([this] { http_.listen_after_bind(); });
        http_.wait_until_ready();
        return bound;
    }

    /// Blocks serving requests until stop() is called from another thread.
    void run(const std::string& host, int port) {
        if (!http_.listen(host, port)) throw IoError("server: cannot listen on " + host + ":" + std::to_string(port));
    }

    void stop() {
        http_.stop();
        if (listener_.joinable()) listener_.join();
    }

    std::optional<Job> job(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = jobs_.find(id);
        if (it == jobs_.end()) return std::nullopt;
        return it->second;
    }

    std::string submit(const std::string& prompt, CreateMode mode) {
        if (prompt.empty()) throw ValidationError("prompt must be a non-empty string");
        if (mode != CreateMode::evolution && !ws_.translator)
            throw ValidationError("mode '" + mode_name(mode) + "' needs a pretrained translator");
        if ((mode == CreateMode::full || mode == CreateMode::translator) && !ws_.imitator)
            throw ValidationError("mode '" + mode_name(mode) + "' needs a trained imitator");
        std::lock_guard lock(mu_);
        Job j;
        j.id = "job-" + std::to_string(++next_id_);
        j.prompt = prompt;
        j.mode = mode;
        jobs_.emplace(j.id, j);
        queue_.push_back(j.id);
        cv_.notify_one();
        return j.id;
    }

private:
    static void reply_json(httplib::Response& res, int status, const nlohmann::json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }
    static void reply_error(httplib::Response& res, int status, const std::string& msg) {
        reply_json(res, status, {{"error", msg}});
    }

    static nlohmann::json parse_body(const httplib::Request& req) {
        try {
            auto j = nlohmann::json::parse(req.body);
            if (!j.is_object()) throw ValidationError("request body must be a JSON object");
            return j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed JSON body: ") + e.what());
        }
    }

    // The server does not read GET bodies, so GET carries the fields as query parameters.
    static nlohmann::json render_query(const httplib::Request& req) {
        if (!req.has_param("params")) throw ValidationError("missing 'params' query parameter");
        nlohmann::json j;
        try {
            j["params"] = nlohmann::json::parse(req.get_param_value("params"));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed 'params' query parameter: ") + e.what());
        }
        if (req.has_param("view")) j["view"] = req.get_param_value("view");
        if (req.has_param("resolution")) {
            try {
                j["resolution"] = std::stoi(req.get_param_value("resolution"));
            } catch (const std::exception&) {
                throw ValidationError("'resolution' must be an integer");
            }
        }
        return j;
    }

    FacialParams params_arg(const nlohmann::json& j, const char* key) const {
        if (!j.contains(key)) throw ValidationError(std::string("missing '") + key + "'");
        FacialParams p = params_from_json(j.at(key));
        validate_params(ws_.schema, p);
        return p;
    }

    static nlohmann::json job_json(const Job& j) {
        nlohmann::json out = {{"job_id", j.id},
                              {"prompt", j.prompt},
                              {"mode", j.mode},
                              {"status", j.status},
                              {"best_score", j.best_score},
                              {"best_score_x100", 100.0 * j.best_score}};
        if (j.result) {
            out["result"] = {{"score", j.result->score},
                             {"score_x100", 100.0 * j.result->score},
                             {"params", nlohmann::json::parse(serialize_params(j.result->params))}};
        }
        if (!j.error.empty()) out["error"] = j.error;
        return out;
    }

    // Wraps a handler so library errors become 400 and anything else 500.
    template <typename F>
    static auto guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const ValidationError& e) {
                reply_error(res, 400, e.what());
            } catch (const ParseError& e) {
                reply_error(res, 400, e.what());
            } catch (const ShapeError& e) {
                reply_error(res, 400, e.what());
            } catch (const std::exception& e) {
                reply_error(res, 500, e.what());
            }
        };
    }

    void routes() {
        http_.Post("/api/jobs", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            if (!body.contains("prompt") || !body.at("prompt").is_string())
                throw ValidationError("'prompt' must be a string");
            const CreateMode mode = parse_mode(body.value("mode", std::string("full")));
            const std::string id = submit(body.at("prompt").get<std::string>(), mode);
            reply_json(res, 202, {{"job_id", id}, {"status", JobStatus::queued}});
        }));
        http_.Get(R"(/api/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto j = job(req.matches[1]);
            if (!j) return reply_error(res, 404, "no job '" + std::string(req.matches[1]) + "'");
            reply_json(res, 200, job_json(*j));
        }));
        http_.Get(R"(/api/jobs/([^/]+)/curve)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto j = job(req.matches[1]);
            if (!j) return reply_error(res, 404, "no job '" + std::string(req.matches[1]) + "'");
            res.set_content(metrics_csv(j->curve), "text/csv");
        }));
        const auto render_handler = guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = req.method == "GET" ? render_query(req) : parse_body(req);
            const FacialParams p = params_arg(body, "params");
            const std::string view = body.value("view", std::string("front"));
            if (view != "front" && view != "side") throw ValidationError("'view' must be front or side");
            const int resolution = body.value("resolution", ws_.config.resolution);
            if (resolution < 8 || resolution > 1024) throw ValidationError("'resolution' outside [8, 1024]");
            const auto img = render(p, ws_.layout, view == "front" ? View::front : View::side, resolution);
            res.set_content(encode_png(img), "image/png");
        });
        http_.Post("/api/render", render_handler);
        http_.Get("/api/render", render_handler);
        http_.Post("/api/interpolate", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            const FacialParams a = params_arg(body, "a"), b = params_arg(body, "b");
            const int steps = body.value("steps", 10);
            if (steps < 1 || steps > 1000) throw ValidationError("'steps' outside [1, 1000]");
            nlohmann::json frames = nlohmann::json::array();
            for (const auto& f : interpolation_frames(a, b, steps)) frames.push_back(nlohmann::json::parse(serialize_params(f)));
            reply_json(res, 200, {{"frames", frames}});
        }));
        http_.Get("/api/schema", [this](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, schema_to_json(ws_.schema));
        });
        http_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (res.body.empty()) reply_error(res, res.status, "no route for " + req.method + " " + req.path);
        });
    }

    void work() {
        for (;;) {
            std::string id;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return shutting_down_ || !queue_.empty(); });
                if (shutting_down_) return;
                id = queue_.front();
                queue_.pop_front();
                jobs_.at(id).status = JobStatus::running;
            }
            Job snapshot = *job(id);
            try {
                CreationResult r = create(ws_, snapshot.prompt, snapshot.mode, [&](const CreateEvent& e) {
                    std::lock_guard lock(mu_);
                    Job& j = jobs_.at(id);
                    j.curve.push_back(e.point);
                    j.best_score = std::max(j.best_score, e.best_score);
                });
                if (!jobs_dir_.empty()) write_creation(ws_, r, jobs_dir_ / id);
                std::lock_guard lock(mu_);
                Job& j = jobs_.at(id);
                j.best_score = std::max(j.best_score, r.score);
                j.result = std::move(r);
                j.status = JobStatus::done;
            } catch (const std::exception& e) {
                std::lock_guard lock(mu_);
                Job& j = jobs_.at(id);
                j.error = e.what();
                j.status = JobStatus::failed;
            }
        }
    }

    const Workspace& ws_;
    std::filesystem::path jobs_dir_;
    httplib::Server http_;
    std::thread listener_;
    std::vector<std::thread> workers_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::string, Job> jobs_;
    std::deque<std::string> queue_;
    std::uint64_t next_id_ = 0;
    bool shutting_down_ = false;
};

}  // namespace t2p
