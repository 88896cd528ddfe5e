#pragma once

// Run configuration, artifact layout and the high-level commands shared by
// the CLI, the job server and the acceptance harness.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "embedder.hpp"
#include "engine.hpp"
#include "evo.hpp"
#include "imitator.hpp"
#include "remote_embedder.hpp"
#include "translator.hpp"

namespace t2p {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticConfig, projection_seed, dim, grid, resolution, pixel_center)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RemoteConfig, host, port, max_retries, backoff_ms, max_in_flight,
                                                timeout_seconds)

struct BackendConfig {
    std::string kind = "synthetic";  // synthetic | remote
    SyntheticConfig synthetic{};
    RemoteConfig remote{};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BackendConfig, kind, synthetic, remote)

struct DataConfig {
    std::size_t count = 2000;
    double split = 0.8;
    std::uint64_t seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataConfig, count, split, seed)

/// Everything a run depends on. Model input/output widths are derived from
/// the schema and backend when the workspace is opened.
struct RunConfig {
    std::string schema = "mini";  // name under data/schemas or a path
    std::string layout = "mini";  // name under data/layouts or a path
    int resolution = 32;
    std::uint64_t seed = 1;
    double budget_seconds = 0.0;  // wall-clock cap for one create, 0 = none
    BackendConfig backend{};
    DataConfig data{};
    ImitatorConfig imitator{};
    ImitatorTrainConfig imitator_train = default_imitator_train();
    TranslatorConfig translator = default_translator();
    TranslatorPretrainConfig pretrain = default_pretrain();
    FineTuneConfig finetune{};
    EvoConfig evolution{};

    /// Adam for the reduced imitator; plain SGD at the published rate stalls
    /// near the mean image.
    static ImitatorTrainConfig default_imitator_train() {
        ImitatorTrainConfig c;
        c.optimizer = OptimizerKind::adam;
        c.lr = 3e-3;
        c.batch_size = 32;
        c.epochs = 200;
        return c;
    }
    /// One layer and one learnable token: 2,000 pairs overfit a deeper trunk.
    static TranslatorConfig default_translator() {
        TranslatorConfig c;
        c.tokens = 2;
        c.layers = 1;
        return c;
    }
    static TranslatorPretrainConfig default_pretrain() {
        TranslatorPretrainConfig c;
        c.lr = 0.02;
        c.sgd.weight_decay = 1e-3;
        return c;
    }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, schema, layout, resolution, seed, budget_seconds, backend,
                                                data, imitator, imitator_train, translator, pretrain, finetune,
                                                evolution)

inline RunConfig load_run_config(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(read_text_file(path)).get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline std::filesystem::path data_dir() {
    if (const char* env = std::getenv("T2P_DATA_DIR"); env && *env) return env;
    return T2P_DATA_DIR;
}

/// A bare name resolves to data/<kind>/<name>.<kind-singular>.json.
inline std::filesystem::path resolve_data_file(const std::string& name, const std::string& kind) {
    if (name.find('/') != std::string::npos || name.ends_with(".json")) return name;
    const std::string suffix = kind == "schemas" ? ".schema.json" : ".layout.json";
    return data_dir() / kind / (name + suffix);
}

inline std::unique_ptr<EmbedderBackend> make_backend(const BackendConfig& cfg, const ParamSchema& schema,
                                                     const EngineLayout& layout, int resolution) {
    if (cfg.kind == "synthetic") {
        SyntheticConfig s = cfg.synthetic;
        s.resolution = resolution;
        return std::make_unique<SyntheticEmbedder>(schema, layout, s);
    }
    if (cfg.kind == "remote") return std::make_unique<RemoteEmbedder>(cfg.remote);
    throw ValidationError("unknown backend kind '" + cfg.kind + "'");
}

/// Loaded schema, layout and backend, plus the trained models when their
/// directories exist under the work directory.
struct Workspace {
    RunConfig config;
    std::filesystem::path work_dir;
    ParamSchema schema;
    EngineLayout layout;
    std::unique_ptr<EmbedderBackend> backend;
    std::optional<ImitatorModel> imitator;
    std::optional<TranslatorModel> translator;

    std::filesystem::path dataset_dir() const { return work_dir / "dataset"; }
    std::filesystem::path imitator_dir() const { return work_dir / "imitator"; }
    std::filesystem::path translator_dir() const { return work_dir / "translator"; }
};

inline Workspace open_workspace(RunConfig cfg, const std::filesystem::path& work_dir, bool load_models = true) {
    Workspace ws;
    ws.work_dir = work_dir;
    ws.schema = load_schema(resolve_data_file(cfg.schema, "schemas"));
    ws.layout = load_layout(resolve_data_file(cfg.layout, "layouts"), ws.schema);
    ws.backend = make_backend(cfg.backend, ws.schema, ws.layout, cfg.resolution);
    cfg.imitator.input_dim = ws.schema.continuous_count();
    cfg.translator.output_dim = ws.schema.continuous_count();
    cfg.translator.embed_dim = ws.backend->dim();
    if (cfg.imitator.resolution() != cfg.resolution)
        throw ValidationError("imitator resolution " + std::to_string(cfg.imitator.resolution()) +
                              " does not match run resolution " + std::to_string(cfg.resolution));
    ws.config = std::move(cfg);
    if (load_models) {
        if (std::filesystem::exists(ws.imitator_dir() / "imitator.json"))
            ws.imitator.emplace(ImitatorModel::load(ws.imitator_dir()));
        if (std::filesystem::exists(ws.translator_dir() / "translator.json"))
            ws.translator.emplace(TranslatorModel::load(ws.translator_dir()));
    }
    return ws;
}

/// Written before any compute so an interrupted run still records what it
/// was. No timestamps, so re-runs leave byte-identical directories.
inline void write_manifest(const std::filesystem::path& out, const RunConfig& cfg, const std::string& command,
                           const nlohmann::json& args = nlohmann::json::object()) {
    std::filesystem::create_directories(out);
    const nlohmann::json m = {{"command", command}, {"args", args}, {"config", cfg}};
    write_text_file(out / "run_manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Training commands

inline RenderDataset gen_data(const Workspace& ws) {
    const auto& d = ws.config.data;
    return generate_dataset(ws.schema, ws.layout, d.count, d.split, d.seed, ws.config.resolution, ws.dataset_dir());
}

/// The dataset written by gen_data; missing files name the expected path.
inline RenderDataset load_workspace_dataset(const Workspace& ws) {
    RenderDataset ds = load_dataset(ws.dataset_dir());
    if (ds.resolution != ws.config.resolution)
        throw ValidationError("dataset resolution " + std::to_string(ds.resolution) + " does not match run resolution " +
                              std::to_string(ws.config.resolution));
    return ds;
}

struct TrainReport {
    double final_train_l1 = 0.0;
    double final_val_l1 = 0.0;
    double baseline_l1 = 0.0;  // mean image or predict-mean, on the validation split
    double seconds = 0.0;
};

inline nlohmann::json to_json(const TrainReport& r) {
    return {{"final_train_l1", r.final_train_l1}, {"final_val_l1", r.final_val_l1}, {"baseline_l1", r.baseline_l1}};
}

/// report.json is reproducible; wall-clock time goes to timing.json.
inline void write_report(const std::filesystem::path& dir, const TrainReport& r) {
    write_text_file(dir / "report.json", to_json(r).dump(2) + "\n");
    write_text_file(dir / "timing.json", nlohmann::json{{"seconds", r.seconds}}.dump(2) + "\n");
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline TrainReport train_imitator_cmd(Workspace& ws, const RenderDataset& ds,
                                      const std::function<void(const EpochStats&)>& on_epoch = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    ImitatorModel model(ws.config.imitator);
    std::ostringstream csv;
    csv.precision(17);
    csv << "epoch,train_l1,val_l1,lr\n";
    const auto res = train_imitator(model, ds, ws.config.imitator_train, nullptr, [&](const EpochStats& e) {
        csv << e.epoch << ',' << e.train_l1 << ',' << e.val_l1 << ',' << e.lr << '\n';
        if (on_epoch) on_epoch(e);
    });
    model.save(ws.imitator_dir());
    write_text_file(ws.imitator_dir() / "history.csv", csv.str());
    TrainReport r;
    if (!res.history.empty()) {
        r.final_train_l1 = res.history.back().train_l1;
        r.final_val_l1 = res.history.back().val_l1;
    }
    r.baseline_l1 = mean_image_baseline(ds, ds.images);
    r.seconds = seconds_since(t0);
    write_report(ws.imitator_dir(), r);
    ws.imitator.emplace(std::move(model));
    return r;
}

inline TrainReport pretrain_translator_cmd(Workspace& ws, const RenderDataset& ds,
                                           const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    TranslatorModel model(ws.config.translator);
    const auto emb = embed_dataset(*ws.backend, ds);
    const auto targets = continuous_targets(ds);
    std::ostringstream csv;
    csv.precision(17);
    csv << "epoch,train_l1,val_l1,lr\n";
    const auto hist = pretrain_translator(model, emb, targets, ds.n_train, ws.config.pretrain, [&](const PretrainEpoch& e) {
        csv << e.epoch << ',' << e.train_l1 << ',' << e.val_l1 << ',' << e.lr << '\n';
        if (on_epoch) on_epoch(e);
    });
    model.save(ws.translator_dir());
    write_text_file(ws.translator_dir() / "history.csv", csv.str());
    TrainReport r;
    if (!hist.empty()) {
        r.final_train_l1 = hist.back().train_l1;
        r.final_val_l1 = hist.back().val_l1;
    }
    r.baseline_l1 = predict_mean_baseline(targets, ds.n_train);
    r.seconds = seconds_since(t0);
    write_report(ws.translator_dir(), r);
    ws.translator.emplace(std::move(model));
    return r;
}

// ---------------------------------------------------------------------------
// Creation

enum class CreateMode {
    full,        // fine-tune, then evolve from the snapshots
    translator,  // fine-tune only; best snapshot, discrete slots zero
    evolution,   // evolve from a random population
    fixed,       // pretrained prediction, no fine-tuning
};

NLOHMANN_JSON_SERIALIZE_ENUM(CreateMode, {{CreateMode::full, "full"},
                                          {CreateMode::translator, "translator"},
                                          {CreateMode::evolution, "evolution"},
                                          {CreateMode::fixed, "fixed"}})

inline std::string mode_name(CreateMode m) { return nlohmann::json(m).get<std::string>(); }

inline CreateMode parse_mode(const std::string& s) {
    for (auto m : {CreateMode::full, CreateMode::translator, CreateMode::evolution, CreateMode::fixed})
        if (mode_name(m) == s) return m;
    throw ParseError("unknown mode '" + s + "' (expected full, translator, evolution or fixed)");
}

struct MetricPoint {
    int step = 0;
    std::string phase;  // finetune | evolution | predict
    double score = 0.0;
};

/// Progress hook. `best_score` is the best two-view score seen so far and
/// never decreases; fine-tuning points carry 1 - loss as `score`.
struct CreateEvent {
    MetricPoint point;
    double best_score = 0.0;
};

struct CreationResult {
    std::string prompt;
    CreateMode mode = CreateMode::full;
    FacialParams params;
    ViewScores views;
    double score = 0.0;
    std::vector<MetricPoint> metrics;
    std::vector<FineTuneStep> finetune;
    std::vector<Snapshot> snapshots;
    std::vector<GenerationStats> evolution;
    double seconds = 0.0;
};

namespace detail {

inline FacialParams with_zero_discrete(const ParamSchema& schema, const std::vector<double>& continuous) {
    FacialParams p = neutral_params(schema);
    p.continuous = continuous;
    for (double& v : p.continuous) v = std::clamp(v, 0.0, 1.0);
    std::fill(p.discrete.begin(), p.discrete.end(), 0);
    return p;
}

}  // namespace detail

/// Produces parameters for one prompt. The reported score is recomputed from
/// the returned parameters with the procedural engine.
inline CreationResult create(const Workspace& ws, const std::string& prompt, CreateMode mode,
                             const std::function<void(const CreateEvent&)>& on_event = {}) {
    if (prompt.empty()) throw ValidationError("create: empty prompt");
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig& cfg = ws.config;
    const bool needs_translator = mode != CreateMode::evolution;
    const bool needs_imitator = mode == CreateMode::full || mode == CreateMode::translator;
    if (needs_translator && !ws.translator)
        throw ValidationError("create: mode '" + mode_name(mode) + "' needs a pretrained translator in " +
                              ws.translator_dir().string());
    if (needs_imitator && !ws.imitator)
        throw ValidationError("create: mode '" + mode_name(mode) + "' needs a trained imitator in " +
                              ws.imitator_dir().string());

    const PromptEmbedding pe = embed_prompt(*ws.backend, prompt);
    const double alpha = cfg.evolution.alpha;
    const Scorer scorer = make_clip_scorer(*ws.backend, pe, ws.layout, alpha, cfg.resolution);

    CreationResult r;
    r.prompt = prompt;
    r.mode = mode;
    double best_seen = -std::numeric_limits<double>::infinity();
    auto emit = [&](MetricPoint p, std::optional<double> engine_score) {
        if (engine_score) best_seen = std::max(best_seen, *engine_score);
        r.metrics.push_back(p);
        if (on_event) on_event({p, std::isfinite(best_seen) ? best_seen : 0.0});
    };
    auto remaining = [&]() {
        return cfg.budget_seconds > 0.0 ? std::max(0.0, cfg.budget_seconds - seconds_since(t0)) : 0.0;
    };

    std::vector<std::vector<double>> seeds;
    std::optional<double> evo_best;
    if (mode == CreateMode::fixed) {
        r.params = detail::with_zero_discrete(ws.schema, predict(*ws.translator, pe.front));
        const double sc = scorer(r.params);
        emit({0, "predict", sc}, sc);
    } else if (needs_imitator) {
        FineTuneConfig ft = cfg.finetune;
        // Fine-tuning gets half of what is left; evolution the rest.
        if (cfg.budget_seconds > 0.0)
            ft.budget_seconds = ft.budget_seconds > 0.0 ? std::min(ft.budget_seconds, remaining() / 2) : remaining() / 2;
        const auto res = finetune_for_prompt(*ws.translator, pe.front, *ws.imitator, *ws.backend, ft,
                                             [&](const FineTuneStep& s) { emit({s.iter, "finetune", 1.0 - s.loss}, {}); });
        r.finetune = res.curve;
        r.snapshots = res.snapshots;
        for (const auto& s : res.snapshots) seeds.push_back(s.continuous);
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& s : res.snapshots) {
            FacialParams p = detail::with_zero_discrete(ws.schema, s.continuous);
            const double sc = scorer(p);
            best_seen = std::max(best_seen, sc);
            if (sc > best) {
                best = sc;
                r.params = std::move(p);
            }
        }
    }

    if (mode == CreateMode::full || mode == CreateMode::evolution) {
        Rng rng = Rng(Rng::mix(cfg.seed, "evolution|" + prompt));
        Population init = init_population(seeds, ws.schema, rng, cfg.evolution);
        EvoConfig ec = cfg.evolution;
        if (cfg.budget_seconds > 0.0) {
            ec.budget_seconds = ec.budget_seconds > 0.0 ? std::min(ec.budget_seconds, remaining()) : remaining();
            // A spent budget still runs generation 0 and one breeding round.
            ec.budget_seconds = std::max(ec.budget_seconds, 1e-9);
        }
        const auto res = evolve(std::move(init), scorer, ws.schema, ec, rng, [&](const GenerationStats& g, const Population&) {
            emit({g.generation, "evolution", g.best_score}, g.best_score);
        });
        evo_best = res.best.score;
        r.evolution = res.curve;
        r.params = res.best.params;
    }

    r.views = clip_score_views(*ws.backend, pe, r.params, ws.layout, alpha, cfg.resolution);
    r.score = r.views.combined;
    if (evo_best && std::abs(*evo_best - r.score) > 1e-12)
        throw Error("create: rescored result " + std::to_string(r.score) + " disagrees with search score " +
                    std::to_string(*evo_best));
    r.seconds = seconds_since(t0);
    return r;
}

inline std::string metrics_csv(const std::vector<MetricPoint>& pts) {
    std::ostringstream out;
    out.precision(17);
    out << "step,phase,score\n";
    for (const auto& p : pts) out << p.step << ',' << p.phase << ',' << p.score << '\n';
    return out.str();
}

inline std::string finetune_csv(const std::vector<FineTuneStep>& steps) {
    std::ostringstream out;
    out.precision(17);
    out << "iter,loss,lr,snapshot\n";
    for (const auto& s : steps) out << s.iter << ',' << s.loss << ',' << s.lr << ',' << (s.snapshot ? 1 : 0) << '\n';
    return out.str();
}

/// params.json, front/side renders, curves and result.json.
inline void write_creation(const Workspace& ws, const CreationResult& r, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    save_params(out / "params.json", r.params);
    save_ppm(out / "front.ppm", render_front(r.params, ws.layout, ws.config.resolution));
    save_ppm(out / "side.ppm", render_side(r.params, ws.layout, ws.config.resolution));
    write_text_file(out / "front.png", encode_png(render_front(r.params, ws.layout, ws.config.resolution)));
    write_text_file(out / "metrics.csv", metrics_csv(r.metrics));
    if (!r.finetune.empty()) write_text_file(out / "finetune.csv", finetune_csv(r.finetune));
    if (!r.evolution.empty()) write_text_file(out / "evolution.csv", evo_curve_csv(r.evolution));
    if (!r.snapshots.empty()) write_text_file(out / "snapshots.json", snapshots_to_json(r.snapshots).dump(2) + "\n");
    const nlohmann::json j = {{"prompt", r.prompt},
                              {"mode", r.mode},
                              {"score", r.score},
                              {"score_x100", 100.0 * r.score},
                              {"front_score", r.views.front},
                              {"side_score", r.views.side}};
    write_text_file(out / "result.json", j.dump(2) + "\n");
    // Wall-clock time is the one output that differs between identical runs.
    write_text_file(out / "timing.json", nlohmann::json{{"seconds", r.seconds}}.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Interpolation and ablation

/// Frames for beta = 1, (n-1)/n, ..., 0, so the first frame is `a` and the
/// last is `b`.
inline std::vector<FacialParams> interpolation_frames(const FacialParams& a, const FacialParams& b, int n) {
    if (n < 1) throw ValidationError("interpolate: need at least 1 step");
    std::vector<FacialParams> frames;
    for (int k = 0; k <= n; ++k) frames.push_back(interpolate(a, b, static_cast<double>(n - k) / n));
    return frames;
}

inline void write_interpolation(const Workspace& ws, const std::vector<FacialParams>& frames,
                                const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    for (std::size_t k = 0; k < frames.size(); ++k) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "frame_%03zu", k);
        save_params(out / (std::string(stem) + ".json"), frames[k]);
        save_ppm(out / (std::string(stem) + ".ppm"), render_front(frames[k], ws.layout, ws.config.resolution));
    }
}

struct AblationRow {
    std::string prompt;
    std::vector<double> scores;  // one per mode, same order as AblationReport::modes
};

struct AblationReport {
    std::vector<CreateMode> modes;
    std::vector<AblationRow> rows;

    std::vector<double> column(std::size_t m) const {
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(r.scores.at(m));
        return out;
    }
    double mean(std::size_t m) const {
        const auto c = column(m);
        return c.empty() ? 0.0 : std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
    }
    /// Sample standard deviation.
    double stddev(std::size_t m) const {
        const auto c = column(m);
        if (c.size() < 2) return 0.0;
        const double mu = mean(m);
        double s = 0.0;
        for (double v : c) s += (v - mu) * (v - mu);
        return std::sqrt(s / static_cast<double>(c.size() - 1));
    }
    /// Fraction of prompts where mode a scores >= b (or > b when strict).
    double win_rate(std::size_t a, std::size_t b, bool strict) const {
        if (rows.empty()) return 0.0;
        std::size_t wins = 0;
        for (const auto& r : rows)
            if (strict ? r.scores[a] > r.scores[b] : r.scores[a] >= r.scores[b]) ++wins;
        return static_cast<double>(wins) / static_cast<double>(rows.size());
    }
    std::size_t index_of(CreateMode m) const {
        for (std::size_t i = 0; i < modes.size(); ++i)
            if (modes[i] == m) return i;
        throw ValidationError("ablation: mode '" + mode_name(m) + "' was not run");
    }

    std::string scores_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "prompt";
        for (auto m : modes) out << ',' << mode_name(m);
        out << '\n';
        for (const auto& r : rows) {
            out << '"' << r.prompt << '"';
            for (double s : r.scores) out << ',' << s;
            out << '\n';
        }
        return out.str();
    }

    /// Mean and standard deviation per mode, reported x100.
    std::string summary_table() const {
        std::ostringstream out;
        out.setf(std::ios::fixed);
        out.precision(2);
        out << "mode        score_x100\n";
        for (std::size_t m = 0; m < modes.size(); ++m) {
            std::string name = mode_name(modes[m]);
            name.resize(12, ' ');
            out << name << 100.0 * mean(m) << " +- " << 100.0 * stddev(m) << '\n';
        }
        return out.str();
    }
};

inline AblationReport ablate(const Workspace& ws, const std::vector<std::string>& prompts,
                             const std::vector<CreateMode>& modes,
                             const std::function<void(const std::string&, CreateMode, double)>& on_result = {}) {
    if (prompts.empty()) throw ValidationError("ablate: no prompts");
    AblationReport rep;
    rep.modes = modes;
    for (const auto& p : prompts) {
        AblationRow row{p, {}};
        for (auto m : modes) {
            row.scores.push_back(create(ws, p, m).score);
            if (on_result) on_result(p, m, row.scores.back());
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

/// Synthetic prompts whose text embedding is the front render of a hidden
/// random parameter vector, so a perfect match scores 1.
inline std::vector<std::string> synthetic_prompts(std::size_t n, std::size_t first = 1) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back("a face target:" + std::to_string(first + i));
    return out;
}

}  // namespace t2p
