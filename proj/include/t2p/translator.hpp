#pragma once

// Embedding -> continuous-parameter regressor: a pre-LN transformer encoder
// over [input embedding, learnable tokens], a linear prediction head, and a
// small bottleneck tuner head that is the only part trained per prompt.

#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "embedder.hpp"
#include "imitator.hpp"
#include "optim.hpp"
#include "tensor.hpp"

namespace t2p {

/// Where the tuner head acts: on the input embedding, added into token 1
/// before the transformer, or on the pooled output feature before the
/// prediction head.
enum class HeadPlacement { input, output };

NLOHMANN_JSON_SERIALIZE_ENUM(HeadPlacement, {{HeadPlacement::input, "input"}, {HeadPlacement::output, "output"}})

struct TranslatorConfig {
    std::size_t embed_dim = 64;
    std::size_t output_dim = 24;
    std::size_t tokens = 4;  // including the input-embedding token
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t ffn_dim = 128;
    std::size_t head_hidden = 0;  // 0 means embed_dim / 4
    HeadPlacement placement = HeadPlacement::input;
    std::uint64_t seed = 1;

    std::size_t bottleneck() const { return head_hidden ? head_hidden : std::max<std::size_t>(1, embed_dim / 4); }

    static TranslatorConfig mini(std::size_t output_dim, std::size_t embed_dim = 64) {
        TranslatorConfig c;
        c.output_dim = output_dim;
        c.embed_dim = embed_dim;
        c.ffn_dim = 2 * embed_dim;
        return c;
    }

    /// Eight layers, eight heads, sixteen tokens.
    static TranslatorConfig full(std::size_t output_dim = 269, std::size_t embed_dim = 512) {
        TranslatorConfig c;
        c.output_dim = output_dim;
        c.embed_dim = embed_dim;
        c.tokens = 16;
        c.layers = 8;
        c.heads = 8;
        c.ffn_dim = 4 * embed_dim;
        return c;
    }

    void validate() const {
        if (embed_dim == 0 || output_dim == 0 || tokens == 0 || heads == 0 || ffn_dim == 0)
            throw ValidationError("translator: zero-sized dimension in config");
        if (embed_dim % heads != 0)
            throw ValidationError("translator: embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                                  std::to_string(heads) + " heads");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TranslatorConfig, embed_dim, output_dim, tokens, layers, heads, ffn_dim,
                                                head_hidden, placement, seed)

/// D -> D/4 -> D bottleneck perceptron applied residually. The last layer
/// starts at zero so a fresh head contributes nothing.
struct TunerHead {
    ad::Tensor w1, b1, w2, b2;

    static TunerHead init(std::size_t d, std::size_t hidden, Rng& rng) {
        TunerHead h;
        h.w1 = ad::Tensor::make({d, hidden}, ad::normal_init(d * hidden, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        h.b1 = ad::Tensor::zeros({hidden});
        h.w2 = ad::Tensor::zeros({hidden, d});
        h.b2 = ad::Tensor::zeros({d});
        return h;
    }

    /// Deep copy with fresh, untracked storage.
    TunerHead clone() const {
        auto copy = [](const ad::Tensor& t) { return ad::Tensor::make(t.shape(), t.values()); };
        return {copy(w1), copy(b1), copy(w2), copy(b2)};
    }

    std::vector<ad::Tensor> parameters() const { return {w1, b1, w2, b2}; }

    void set_tracking(bool on) {
        for (auto& p : parameters()) p.set_requires_grad(on);
    }

    ad::Tensor apply(const ad::Tensor& x) const {
        return ad::add(x, ad::dense(ad::relu(ad::dense(x, w1, b1)), w2, b2));
    }
};

class TranslatorModel {
public:
    explicit TranslatorModel(TranslatorConfig config) : config_(std::move(config)) {
        config_.validate();
        Rng rng = Rng(config_.seed).fork("translator-init");
        const std::size_t D = config_.embed_dim, F = config_.ffn_dim;
        const double sd = 1.0 / std::sqrt(static_cast<double>(D));
        if (config_.tokens > 1)
            tokens_ = ad::Tensor::parameter({config_.tokens - 1, D}, ad::normal_init((config_.tokens - 1) * D, 1.0, rng));
        auto ones = [](std::size_t n) { return ad::Tensor::parameter({n}, std::vector<double>(n, 1.0)); };
        auto zeros = [](std::size_t n) { return ad::Tensor::parameter({n}, std::vector<double>(n, 0.0)); };
        auto dense_w = [&](std::size_t in, std::size_t out) {
            return ad::Tensor::parameter({in, out}, ad::normal_init(in * out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        };
        for (std::size_t l = 0; l < config_.layers; ++l) {
            Layer L;
            L.ln1_g = ones(D);
            L.ln1_b = zeros(D);
            L.wq = dense_w(D, D);
            L.bq = zeros(D);
            L.wk = dense_w(D, D);
            L.bk = zeros(D);
            L.wv = dense_w(D, D);
            L.bv = zeros(D);
            L.wo = dense_w(D, D);
            L.bo = zeros(D);
            L.ln2_g = ones(D);
            L.ln2_b = zeros(D);
            L.w1 = dense_w(D, F);
            L.b1 = zeros(F);
            L.w2 = dense_w(F, D);
            L.b2 = zeros(D);
            layers_.push_back(std::move(L));
        }
        lnf_g_ = ones(D);
        lnf_b_ = zeros(D);
        pred_w_ = ad::Tensor::parameter({D, config_.output_dim},
                                        ad::normal_init(D * config_.output_dim, 0.1 * sd, rng));
        // Outputs start at the centre of the normalized range.
        pred_b_ = ad::Tensor::parameter({config_.output_dim}, std::vector<double>(config_.output_dim, 0.5));
        head_ = TunerHead::init(D, config_.bottleneck(), rng);
    }

    const TranslatorConfig& config() const { return config_; }
    std::size_t embed_dim() const { return config_.embed_dim; }
    std::size_t output_dim() const { return config_.output_dim; }
    const TunerHead& head() const { return head_; }

    /// e[B, D] -> raw parameter predictions [B, C]. `head` defaults to the
    /// model's own (identity at rest) head.
    ad::Tensor forward(const ad::Tensor& e, const TunerHead* head = nullptr) const {
        const std::size_t D = config_.embed_dim;
        if (e.rank() != 2 || e.dim(1) != D)
            throw ShapeError("translator: expected embeddings [B," + std::to_string(D) + "], got " +
                             ad::shape_str(e.shape()));
        const TunerHead& h = head ? *head : head_;
        const std::size_t B = e.dim(0), K = config_.tokens;
        ad::Tensor first = config_.placement == HeadPlacement::input ? h.apply(e) : e;
        ad::Tensor x = ad::reshape(first, {B, 1, D});
        if (K > 1) x = ad::concat({x, ad::broadcast_leading(tokens_, B)}, 1);
        for (const auto& L : layers_) {
            x = ad::add(x, attention(L, ad::layer_norm(x, L.ln1_g, L.ln1_b), B));
            const ad::Tensor f = ad::dense(ad::relu(ad::dense(ad::layer_norm(x, L.ln2_g, L.ln2_b), L.w1, L.b1)), L.w2, L.b2);
            x = ad::add(x, f);
        }
        ad::Tensor out = ad::reshape(ad::slice(x, 1, 0, 1), {B, D});
        out = ad::layer_norm(out, lnf_g_, lnf_b_);
        if (config_.placement == HeadPlacement::output) out = h.apply(out);
        return ad::dense(out, pred_w_, pred_b_);
    }

    /// Trunk weights: everything except the tuner head.
    std::vector<ad::Tensor> trunk_parameters() const {
        std::vector<ad::Tensor> out;
        for (auto& [name, t] : trunk_named()) out.push_back(t);
        return out;
    }

    NamedTensors named_tensors() const {
        NamedTensors out = trunk_named();
        out.emplace_back("head.w1", head_.w1);
        out.emplace_back("head.b1", head_.b1);
        out.emplace_back("head.w2", head_.w2);
        out.emplace_back("head.b2", head_.b2);
        return out;
    }

    void set_trunk_tracking(bool on) {
        for (auto& p : trunk_parameters()) p.set_requires_grad(on);
    }

    void save(const std::filesystem::path& dir) const {
        save_checkpoint(dir / "translator.ckpt", named_tensors());
        write_text_file(dir / "translator.json", nlohmann::json(config_).dump(2) + "\n");
    }

    static TranslatorModel load(const std::filesystem::path& dir) {
        const auto cfg_path = dir / "translator.json";
        if (!std::filesystem::exists(cfg_path)) throw IoError("translator: missing '" + cfg_path.string() + "'");
        TranslatorConfig cfg = nlohmann::json::parse(read_text_file(cfg_path)).get<TranslatorConfig>();
        cfg.validate();
        TranslatorModel model(cfg);
        NamedTensors named = model.named_tensors();
        load_checkpoint_into(dir / "translator.ckpt", named);
        return model;
    }

private:
    struct Layer {
        ad::Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    NamedTensors trunk_named() const {
        NamedTensors out;
        if (config_.tokens > 1) out.emplace_back("tokens", tokens_);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            const std::string p = "layer." + std::to_string(l) + ".";
            for (auto& [n, t] : std::vector<std::pair<const char*, ad::Tensor>>{
                     {"ln1.g", L.ln1_g}, {"ln1.b", L.ln1_b}, {"wq", L.wq},       {"bq", L.bq},
                     {"wk", L.wk},       {"bk", L.bk},       {"wv", L.wv},       {"bv", L.bv},
                     {"wo", L.wo},       {"bo", L.bo},       {"ln2.g", L.ln2_g}, {"ln2.b", L.ln2_b},
                     {"ffn.w1", L.w1},   {"ffn.b1", L.b1},   {"ffn.w2", L.w2},   {"ffn.b2", L.b2}})
                out.emplace_back(p + n, t);
        }
        out.emplace_back("lnf.g", lnf_g_);
        out.emplace_back("lnf.b", lnf_b_);
        out.emplace_back("pred.w", pred_w_);
        out.emplace_back("pred.b", pred_b_);
        return out;
    }

    ad::Tensor attention(const Layer& L, const ad::Tensor& x, std::size_t B) const {
        const std::size_t K = config_.tokens, H = config_.heads, D = config_.embed_dim, dh = D / H;
        auto split = [&](const ad::Tensor& t) {
            return ad::reshape(ad::permute(ad::reshape(t, {B, K, H, dh}), {0, 2, 1, 3}), {B * H, K, dh});
        };
        const ad::Tensor q = split(ad::dense(x, L.wq, L.bq));
        const ad::Tensor k = split(ad::dense(x, L.wk, L.bk));
        const ad::Tensor v = split(ad::dense(x, L.wv, L.bv));
        const ad::Tensor att = ad::softmax(ad::scale(ad::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))));
        const ad::Tensor ctx = ad::reshape(ad::permute(ad::reshape(ad::bmm(att, v), {B, H, K, dh}), {0, 2, 1, 3}), {B, K, D});
        return ad::dense(ctx, L.wo, L.bo);
    }

    TranslatorConfig config_;
    ad::Tensor tokens_;
    std::vector<Layer> layers_;
    ad::Tensor lnf_g_, lnf_b_, pred_w_, pred_b_;
    TunerHead head_;
};

inline ad::Tensor embedding_tensor(const Embedding& e) { return ad::Tensor::constant({1, e.size()}, e); }

/// Parameter prediction for one embedding, clamped to [0,1].
inline std::vector<double> predict(const TranslatorModel& model, const Embedding& e, const TunerHead* head = nullptr) {
    if (e.size() != model.embed_dim())
        throw ShapeError("predict: embedding dimension " + std::to_string(e.size()) + ", model expects " +
                         std::to_string(model.embed_dim()));
    std::vector<double> out = model.forward(embedding_tensor(e), head).values();
    for (double& v : out) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining on (image embedding, parameters) pairs

struct TranslatorPretrainConfig {
    int epochs = 300;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    int decay_epoch = 180;  // lr x decay_factor from this epoch on
    double decay_factor = 0.1;
    SgdConfig sgd{};
    std::uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TranslatorPretrainConfig, epochs, batch_size, lr, decay_epoch,
                                                decay_factor, sgd, seed)

struct PretrainEpoch {
    int epoch = 0;
    double train_l1 = 0.0;
    double val_l1 = 0.0;
    double lr = 0.0;
};

/// Image embeddings of every dataset render, in dataset order.
inline std::vector<Embedding> embed_dataset(const EmbedderBackend& backend, const RenderDataset& ds) {
    std::vector<Embedding> out;
    out.reserve(ds.size());
    for (const auto& img : ds.images) out.push_back(backend.embed_image(img));
    return out;
}

namespace detail {

inline ad::Tensor stack_rows(const std::vector<std::vector<double>>& rows, const std::vector<std::size_t>& idx) {
    const std::size_t d = rows.at(idx.at(0)).size();
    std::vector<double> v;
    v.reserve(idx.size() * d);
    for (auto i : idx) v.insert(v.end(), rows[i].begin(), rows[i].end());
    return ad::Tensor::constant({idx.size(), d}, std::move(v));
}

}  // namespace detail

inline std::vector<std::vector<double>> continuous_targets(const RenderDataset& ds) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ds.params) out.push_back(p.continuous);
    return out;
}

/// Mean |F(e) - x| over the rows in idx, with raw (unclamped) outputs.
inline double translator_l1(const TranslatorModel& model, const std::vector<Embedding>& emb,
                            const std::vector<std::vector<double>>& targets, const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t s = 0; s < idx.size(); s += 128) {
        std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + 128)));
        const ad::Tensor pred = model.forward(detail::stack_rows(emb, chunk));
        total += ad::l1_loss(pred, detail::stack_rows(targets, chunk)).item() * static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(idx.size());
}

/// L1 of predicting the training-split mean parameter vector on the held-out rows.
inline double predict_mean_baseline(const std::vector<std::vector<double>>& targets, std::size_t n_train) {
    const std::size_t C = targets.at(0).size();
    std::vector<double> mean(C, 0.0);
    for (std::size_t i = 0; i < n_train; ++i)
        for (std::size_t c = 0; c < C; ++c) mean[c] += targets[i][c];
    for (auto& v : mean) v /= static_cast<double>(n_train);
    double total = 0.0;
    for (std::size_t i = n_train; i < targets.size(); ++i)
        for (std::size_t c = 0; c < C; ++c) total += std::abs(targets[i][c] - mean[c]);
    return total / static_cast<double>((targets.size() - n_train) * C);
}

/// Minimizes mean L1 between F(e_I) and x over the first n_train rows.
/// The tuner head is not trained here and stays at zero contribution.
inline std::vector<PretrainEpoch> pretrain_translator(TranslatorModel& model, const std::vector<Embedding>& emb,
                                                      const std::vector<std::vector<double>>& targets,
                                                      std::size_t n_train, const TranslatorPretrainConfig& cfg,
                                                      const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
    if (n_train == 0 || emb.size() != targets.size() || n_train > emb.size())
        throw ValidationError("pretrain_translator: inconsistent dataset sizes");
    if (emb[0].size() != model.embed_dim())
        throw ShapeError("pretrain_translator: embedding dimension " + std::to_string(emb[0].size()) +
                         ", model expects " + std::to_string(model.embed_dim()));
    if (targets[0].size() != model.output_dim())
        throw ShapeError("pretrain_translator: " + std::to_string(targets[0].size()) + " targets, model predicts " +
                         std::to_string(model.output_dim()));
    std::vector<std::size_t> train_idx(n_train), val_idx(emb.size() - n_train);
    std::iota(train_idx.begin(), train_idx.end(), 0);
    std::iota(val_idx.begin(), val_idx.end(), n_train);

    model.set_trunk_tracking(true);
    Sgd opt(model.trunk_parameters(), cfg.sgd);
    Rng rng = Rng(cfg.seed).fork("translator-pretrain");
    const std::size_t bs = cfg.batch_size == 0 ? n_train : cfg.batch_size;
    std::vector<PretrainEpoch> history;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = epoch >= cfg.decay_epoch ? cfg.lr * cfg.decay_factor : cfg.lr;
        for (std::size_t i = train_idx.size(); i > 1; --i) std::swap(train_idx[i - 1], train_idx[rng.uniform_index(i)]);
        double sum = 0.0;
        for (std::size_t s = 0; s < n_train; s += bs) {
            std::vector<std::size_t> batch(train_idx.begin() + static_cast<std::ptrdiff_t>(s),
                                           train_idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, s + bs)));
            opt.zero_grad();
            const ad::Tensor loss =
                ad::l1_loss(model.forward(detail::stack_rows(emb, batch)), detail::stack_rows(targets, batch));
            if (!std::isfinite(loss.item()))
                throw DivergenceError("pretrain_translator: non-finite loss at epoch " + std::to_string(epoch));
            loss.backward();
            opt.step(lr);
            sum += loss.item() * static_cast<double>(batch.size());
        }
        PretrainEpoch st{epoch, sum / static_cast<double>(n_train), translator_l1(model, emb, targets, val_idx), lr};
        history.push_back(st);
        if (on_epoch) on_epoch(st);
    }
    model.set_trunk_tracking(false);
    return history;
}

// ---------------------------------------------------------------------------
// Prompt fine-tuning

struct Snapshot {
    int iter = 0;
    double loss = 0.0;
    std::vector<double> continuous;  // clamped to [0,1]
};

inline nlohmann::json snapshots_to_json(const std::vector<Snapshot>& snaps) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : snaps) j.push_back({{"iter", s.iter}, {"loss", s.loss}, {"continuous", s.continuous}});
    return j;
}

inline std::vector<Snapshot> snapshots_from_json(const nlohmann::json& j) {
    std::vector<Snapshot> out;
    for (const auto& e : j) out.push_back({e.at("iter").get<int>(), e.at("loss").get<double>(),
                                           e.at("continuous").get<std::vector<double>>()});
    return out;
}

struct FineTuneConfig {
    double base_lr = 0.05;  // eta_t multiplies this
    double eta_min = 0.0;
    double eta_max = 1.0;
    int period = 10;  // N
    int patience = 100;
    int max_iterations = 1000;
    double budget_seconds = 0.0;  // 0 means unlimited
    std::size_t keep_snapshots = 5;
    double momentum = 0.0;  // plain gradient steps by default
    double weight_decay = 0.0;
    double converged_loss = 1e-12;  // stop once the loss is this small
    std::uint64_t seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FineTuneConfig, base_lr, eta_min, eta_max, period, patience,
                                                max_iterations, budget_seconds, keep_snapshots, momentum, weight_decay,
                                                converged_loss, seed)

struct FineTuneStep {
    int iter = 0;
    double loss = 0.0;
    double lr = 0.0;
    bool snapshot = false;
};

struct FineTuneResult {
    std::vector<Snapshot> snapshots;  // last keep_snapshots, iterations increasing
    std::vector<FineTuneStep> curve;
    double best_loss = 0.0;
    int best_iter = 0;
    std::vector<double> best_continuous;
    std::vector<double> initial_continuous;
    double initial_loss = 0.0;
    TunerHead head;
};

/// Trains a copy of the tuner head so that the imitator render of the
/// predicted parameters embeds close to `text_embedding` (loss 1 - cos).
/// Learning rate follows the warm-restart schedule; the predicted parameters
/// are recorded whenever N_t == N. Stops after `patience` iterations without
/// a new best loss. Trunk weights are never modified.
inline FineTuneResult finetune_for_prompt(const TranslatorModel& model, const Embedding& text_embedding,
                                          const ImitatorModel& imitator, const EmbedderBackend& backend,
                                          const FineTuneConfig& cfg,
                                          const std::function<void(const FineTuneStep&)>& on_step = {}) {
    if (!backend.differentiable()) throw Error("finetune: the embedding backend is not differentiable");
    if (imitator.input_dim() != model.output_dim())
        throw ValidationError("finetune: imitator takes " + std::to_string(imitator.input_dim()) +
                              " controllers, translator predicts " + std::to_string(model.output_dim()));
    if (text_embedding.size() != model.embed_dim()) throw ShapeError("finetune: text embedding dimension mismatch");

    SgdrSchedule sched(cfg.eta_min, cfg.eta_max, cfg.period);
    FineTuneResult r;
    r.head = model.head().clone();
    r.head.set_tracking(true);
    Sgd opt(r.head.parameters(), {cfg.momentum, cfg.weight_decay});
    const ad::Tensor e = embedding_tensor(text_embedding);
    const ad::Tensor target = ad::Tensor::constant({text_embedding.size()}, text_embedding);
    const auto t0 = std::chrono::steady_clock::now();
    std::deque<Snapshot> snaps;
    int since_best = 0;

    auto clamped = [](std::vector<double> v) {
        for (double& x : v) x = std::clamp(x, 0.0, 1.0);
        return v;
    };

    for (int it = 0; it < cfg.max_iterations; ++it) {
        opt.zero_grad();
        const ad::Tensor x = model.forward(e, &r.head);
        const ad::Tensor img = imitate(imitator, ad::reshape(x, {model.output_dim()}));
        const ad::Tensor loss = ad::add_scalar(ad::scale(ad::cosine_similarity(target, backend.embed_image_graph(img)), -1.0), 1.0);
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw DivergenceError("finetune: non-finite loss at iteration " + std::to_string(it));
        const std::vector<double> pred = clamped(x.values());
        if (it == 0) {
            r.initial_continuous = pred;
            r.initial_loss = lv;
        }
        if (it == 0 || lv < r.best_loss) {
            r.best_loss = lv;
            r.best_iter = it;
            r.best_continuous = pred;
            since_best = 0;
        } else {
            ++since_best;
        }
        const double lr = cfg.base_lr * sched.lr();
        FineTuneStep step{it, lv, lr, sched.is_snapshot_point()};
        if (step.snapshot) {
            snaps.push_back({it, lv, pred});
            if (snaps.size() > cfg.keep_snapshots) snaps.pop_front();
        }
        r.curve.push_back(step);
        if (on_step) on_step(step);
        if (lv <= cfg.converged_loss || since_best >= cfg.patience) break;
        if (cfg.budget_seconds > 0.0 &&
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= cfg.budget_seconds)
            break;
        loss.backward();
        opt.step(lr);
        sched.advance();
    }
    r.snapshots.assign(snaps.begin(), snaps.end());
    // A run that stops before its first snapshot point still hands on its best prediction.
    if (r.snapshots.empty()) r.snapshots.push_back({r.best_iter, r.best_loss, r.best_continuous});
    r.head.set_tracking(false);
    return r;
}

}  // namespace t2p
