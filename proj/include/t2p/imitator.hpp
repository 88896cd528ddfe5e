#pragma once

// Differentiable surrogate of the front-view renderer: a dense positional
// encoder followed by a stack of 4x4 / stride-2 transposed convolutions.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "engine.hpp"
#include "optim.hpp"
#include "raster_tensor.hpp"
#include "tensor.hpp"

namespace t2p {

struct ImitatorConfig {
    std::size_t input_dim = 24;
    std::vector<std::size_t> encoder = {128, 256, 2048};
    std::size_t seed_channels = 32;  // encoder output reshaped to [seed_channels, seed_size, seed_size]
    std::size_t seed_size = 8;
    std::vector<std::size_t> deconv = {16, 3};  // last entry must be 3
    bool batch_norm = false;
    double output_init_scale = 0.1;  // multiplier on the last layer's He init
    std::uint64_t seed = 1;

    int resolution() const { return static_cast<int>(seed_size << deconv.size()); }

    static ImitatorConfig mini(std::size_t input_dim) {
        ImitatorConfig c;
        c.input_dim = input_dim;
        return c;
    }

    /// 269 -> 1024 -> 2048 -> 4096 -> 8192, reshape to 2048x2x2, seven
    /// deconvolution stages to 256x256x3, with batch normalization.
    static ImitatorConfig full(std::size_t input_dim = 269) {
        ImitatorConfig c;
        c.input_dim = input_dim;
        c.encoder = {1024, 2048, 4096, 8192};
        c.seed_channels = 2048;
        c.seed_size = 2;
        c.deconv = {512, 512, 512, 256, 128, 64, 3};
        c.batch_norm = true;
        return c;
    }

    void validate() const {
        if (encoder.empty() || deconv.empty()) throw ValidationError("imitator: empty layer list");
        if (encoder.back() != seed_channels * seed_size * seed_size)
            throw ValidationError("imitator: encoder width " + std::to_string(encoder.back()) +
                                  " does not reshape to the seed volume");
        if (deconv.back() != 3) throw ValidationError("imitator: last deconvolution must output 3 channels");
    }
};

inline nlohmann::json to_json(const ImitatorConfig& c) {
    return {{"input_dim", c.input_dim}, {"encoder", c.encoder},       {"seed_channels", c.seed_channels},
            {"seed_size", c.seed_size}, {"deconv", c.deconv},         {"batch_norm", c.batch_norm},
            {"output_init_scale", c.output_init_scale}, {"seed", c.seed},           {"resolution", c.resolution()}};
}

inline ImitatorConfig imitator_config_from_json(const nlohmann::json& j) {
    ImitatorConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.encoder = j.at("encoder").get<std::vector<std::size_t>>();
    c.seed_channels = j.at("seed_channels").get<std::size_t>();
    c.seed_size = j.at("seed_size").get<std::size_t>();
    c.deconv = j.at("deconv").get<std::vector<std::size_t>>();
    c.batch_norm = j.value("batch_norm", false);
    c.output_init_scale = j.value("output_init_scale", 0.1);
    c.seed = j.value("seed", std::uint64_t{1});
    c.validate();
    return c;
}

class ImitatorModel {
public:
    explicit ImitatorModel(ImitatorConfig config) : config_(std::move(config)) {
        config_.validate();
        Rng rng = Rng(config_.seed).fork("imitator-init");
        std::size_t in = config_.input_dim;
        for (std::size_t i = 0; i < config_.encoder.size(); ++i) {
            const std::size_t out = config_.encoder[i];
            enc_w_.push_back(ad::Tensor::parameter({in, out}, ad::he_normal(in * out, in, rng)));
            enc_b_.push_back(ad::Tensor::parameter({out}, std::vector<double>(out, 0.0)));
            in = out;
        }
        std::size_t ch = config_.seed_channels;
        for (std::size_t i = 0; i < config_.deconv.size(); ++i) {
            const std::size_t co = config_.deconv[i];
            // Each output pixel of a stride-2 4x4 transposed conv sums 4 taps per input channel.
            const bool last = i + 1 == config_.deconv.size();
            auto w = ad::he_normal(ch * co * 16, ch * 4, rng);
            // Small output layer so training starts near the bias (the mean image).
            if (last)
                for (auto& v : w) v *= config_.output_init_scale;
            dec_w_.push_back(ad::Tensor::parameter({ch, co, 4, 4}, std::move(w)));
            dec_b_.push_back(ad::Tensor::parameter({co}, std::vector<double>(co, 0.0)));
            if (config_.batch_norm && !last) {
                bn_gamma_.push_back(ad::Tensor::parameter({co}, std::vector<double>(co, 1.0)));
                bn_beta_.push_back(ad::Tensor::parameter({co}, std::vector<double>(co, 0.0)));
                running_mean_.emplace_back(co, 0.0);
                running_var_.emplace_back(co, 1.0);
            }
            ch = co;
        }
    }

    const ImitatorConfig& config() const { return config_; }
    int resolution() const { return config_.resolution(); }
    std::size_t input_dim() const { return config_.input_dim; }

    /// x[B, C] -> image batch [B, 3, R, R]. With `training`, batch norm uses
    /// batch statistics and updates the running averages.
    ad::Tensor forward(const ad::Tensor& x, bool training = false) {
        if (x.rank() != 2 || x.dim(1) != config_.input_dim)
            throw ShapeError("imitator: expected input [B," + std::to_string(config_.input_dim) + "], got " +
                             ad::shape_str(x.shape()));
        const std::size_t B = x.dim(0);
        ad::Tensor h = x;
        for (std::size_t i = 0; i < enc_w_.size(); ++i) h = ad::relu(ad::dense(h, enc_w_[i], enc_b_[i]));
        h = ad::reshape(h, {B, config_.seed_channels, config_.seed_size, config_.seed_size});
        for (std::size_t i = 0; i < dec_w_.size(); ++i) {
            h = ad::conv_transpose2d(h, dec_w_[i], dec_b_[i]);
            if (i + 1 == dec_w_.size()) break;
            if (config_.batch_norm) h = batch_norm(h, i, training);
            h = ad::relu(h);
        }
        return h;
    }

    /// Forward pass without BN statistic updates; usable from const contexts.
    ad::Tensor infer(const ad::Tensor& x) const { return const_cast<ImitatorModel*>(this)->forward(x, false); }

    std::vector<ad::Tensor> parameters() const {
        std::vector<ad::Tensor> out;
        for (std::size_t i = 0; i < enc_w_.size(); ++i) {
            out.push_back(enc_w_[i]);
            out.push_back(enc_b_[i]);
        }
        for (std::size_t i = 0; i < dec_w_.size(); ++i) {
            out.push_back(dec_w_[i]);
            out.push_back(dec_b_[i]);
        }
        for (std::size_t i = 0; i < bn_gamma_.size(); ++i) {
            out.push_back(bn_gamma_[i]);
            out.push_back(bn_beta_[i]);
        }
        return out;
    }

    /// Weights plus batch-norm running statistics, by stable names.
    NamedTensors named_tensors() const {
        NamedTensors out;
        for (std::size_t i = 0; i < enc_w_.size(); ++i) {
            out.emplace_back("enc." + std::to_string(i) + ".w", enc_w_[i]);
            out.emplace_back("enc." + std::to_string(i) + ".b", enc_b_[i]);
        }
        for (std::size_t i = 0; i < dec_w_.size(); ++i) {
            out.emplace_back("dec." + std::to_string(i) + ".w", dec_w_[i]);
            out.emplace_back("dec." + std::to_string(i) + ".b", dec_b_[i]);
        }
        for (std::size_t i = 0; i < bn_gamma_.size(); ++i) {
            out.emplace_back("bn." + std::to_string(i) + ".gamma", bn_gamma_[i]);
            out.emplace_back("bn." + std::to_string(i) + ".beta", bn_beta_[i]);
        }
        return out;
    }

    void set_tracking(bool on) {
        for (auto& p : parameters()) p.set_requires_grad(on);
    }

    void zero_grad() {
        for (auto& p : parameters()) p.zero_grad();
    }

    /// Output bias of the last stage, e.g. to start from the data mean.
    ad::Tensor& output_bias() { return dec_b_.back(); }

    void save(const std::filesystem::path& dir) const {
        NamedTensors named = named_tensors();
        for (std::size_t i = 0; i < running_mean_.size(); ++i) {
            const std::size_t n = running_mean_[i].size();
            named.emplace_back("bn." + std::to_string(i) + ".running_mean", ad::Tensor::make({n}, running_mean_[i]));
            named.emplace_back("bn." + std::to_string(i) + ".running_var", ad::Tensor::make({n}, running_var_[i]));
        }
        save_checkpoint(dir / "imitator.ckpt", named);
        write_text_file(dir / "imitator.json", to_json(config_).dump(2) + "\n");
    }

    static ImitatorModel load(const std::filesystem::path& dir) {
        const auto cfg_path = dir / "imitator.json";
        if (!std::filesystem::exists(cfg_path)) throw IoError("imitator: missing '" + cfg_path.string() + "'");
        ImitatorModel model(imitator_config_from_json(nlohmann::json::parse(read_text_file(cfg_path))));
        NamedTensors named = model.named_tensors();
        std::vector<ad::Tensor> stats;
        for (std::size_t i = 0; i < model.running_mean_.size(); ++i) {
            const std::size_t n = model.running_mean_[i].size();
            stats.push_back(ad::Tensor::make({n}, model.running_mean_[i]));
            stats.push_back(ad::Tensor::make({n}, model.running_var_[i]));
            named.emplace_back("bn." + std::to_string(i) + ".running_mean", stats[stats.size() - 2]);
            named.emplace_back("bn." + std::to_string(i) + ".running_var", stats.back());
        }
        load_checkpoint_into(dir / "imitator.ckpt", named);
        for (std::size_t i = 0; i < model.running_mean_.size(); ++i) {
            model.running_mean_[i] = stats[2 * i].values();
            model.running_var_[i] = stats[2 * i + 1].values();
        }
        return model;
    }

private:
    ad::Tensor batch_norm(const ad::Tensor& h, std::size_t i, bool training) {
        constexpr double eps = 1e-5, momentum = 0.1;
        if (training && h.dim(0) > 1) {
            std::vector<double> mu, var;
            ad::Tensor out = ad::batch_norm2d(h, bn_gamma_[i], bn_beta_[i], eps, &mu, &var);
            for (std::size_t c = 0; c < mu.size(); ++c) {
                running_mean_[i][c] = (1 - momentum) * running_mean_[i][c] + momentum * mu[c];
                running_var_[i][c] = (1 - momentum) * running_var_[i][c] + momentum * var[c];
            }
            return out;
        }
        const std::size_t C = bn_gamma_[i].numel();
        std::vector<double> inv(C), shift(C);
        for (std::size_t c = 0; c < C; ++c) {
            inv[c] = 1.0 / std::sqrt(running_var_[i][c] + eps);
            shift[c] = -running_mean_[i][c] * inv[c];
        }
        // gamma * (x - mu) / sd + beta, keeping gamma and beta in the graph.
        const ad::Tensor normed =
            ad::channel_affine(h, ad::Tensor::constant({C}, inv), ad::Tensor::constant({C}, shift));
        return ad::channel_affine(normed, bn_gamma_[i], bn_beta_[i]);
    }

    ImitatorConfig config_;
    std::vector<ad::Tensor> enc_w_, enc_b_, dec_w_, dec_b_, bn_gamma_, bn_beta_;
    std::vector<std::vector<double>> running_mean_, running_var_;
};

/// Differentiable render of one continuous vector x[C] -> [3, R, R].
/// Not clamped; clamp only when exporting an image.
inline ad::Tensor imitate(const ImitatorModel& model, const ad::Tensor& x) {
    if (x.numel() != model.input_dim())
        throw ShapeError("imitate: expected " + std::to_string(model.input_dim()) + " controllers, got " +
                         std::to_string(x.numel()));
    const int r = model.resolution();
    const ad::Tensor out = model.infer(ad::reshape(x, {1, model.input_dim()}));
    return ad::reshape(out, {3, static_cast<std::size_t>(r), static_cast<std::size_t>(r)});
}

inline RasterImage imitate_image(const ImitatorModel& model, const std::vector<double>& continuous) {
    const ad::Tensor out = imitate(model, ad::Tensor::constant({continuous.size()}, continuous));
    return chw_to_image(out.values(), 0, model.resolution(), model.resolution());
}

// ---------------------------------------------------------------------------
// Dataset

struct RenderDataset {
    std::vector<FacialParams> params;
    std::vector<RasterImage> images;  // quantized front renders, as stored on disk
    std::size_t n_train = 0;
    std::uint64_t seed = 0;
    int resolution = 0;

    std::size_t size() const { return params.size(); }
    std::size_t n_val() const { return params.size() - n_train; }
};

/// floor(n * ratio) training pairs, the remainder held out.
inline std::size_t train_count(std::size_t n, double ratio) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9));
}

/// Samples n continuous vectors (discrete slots zero) and renders their
/// front views. When `out` is non-empty the dataset is also written there.
inline RenderDataset generate_dataset(const ParamSchema& schema, const EngineLayout& layout, std::size_t n,
                                      double split_ratio, std::uint64_t seed, int resolution,
                                      const std::filesystem::path& out = {}) {
    if (n < 2) throw ValidationError("generate_dataset: need at least 2 samples");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ValidationError("generate_dataset: split ratio outside (0,1)");
    RenderDataset ds;
    ds.seed = seed;
    ds.resolution = resolution;
    ds.n_train = train_count(n, split_ratio);
    Rng rng = Rng(seed).fork("dataset");
    for (std::size_t i = 0; i < n; ++i) {
        FacialParams p = sample_uniform(schema, rng);
        std::fill(p.discrete.begin(), p.discrete.end(), 0);
        ds.images.push_back(quantized(render_front(p, layout, resolution)));
        ds.params.push_back(std::move(p));
    }
    if (!out.empty()) {
        std::filesystem::create_directories(out / "images");
        std::string lines;
        for (std::size_t i = 0; i < n; ++i) {
            lines += serialize_params(ds.params[i]) + "\n";
            char name[32];
            std::snprintf(name, sizeof name, "%06zu.ppm", i);
            save_ppm(out / "images" / name, ds.images[i]);
        }
        write_text_file(out / "params.jsonl", lines);
        const nlohmann::json manifest = {{"schema_id", schema.id},     {"seed", seed},
                                         {"count", n},                 {"train", ds.n_train},
                                         {"val", n - ds.n_train},      {"split_ratio", split_ratio},
                                         {"resolution", resolution},   {"split_rule", "first floor(n*ratio) are train"},
                                         {"discrete_slots", "zeroed"}};
        write_text_file(out / "manifest.json", manifest.dump(2) + "\n");
    }
    return ds;
}

inline RenderDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) throw IoError("dataset: missing '" + manifest_path.string() + "'");
    const auto manifest = nlohmann::json::parse(read_text_file(manifest_path));
    RenderDataset ds;
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.resolution = manifest.at("resolution").get<int>();
    ds.n_train = manifest.at("train").get<std::size_t>();
    const std::size_t n = manifest.at("count").get<std::size_t>();
    std::istringstream lines(read_text_file(dir / "params.jsonl"));
    std::string line;
    while (std::getline(lines, line))
        if (!line.empty()) ds.params.push_back(deserialize_params(line));
    if (ds.params.size() != n)
        throw ParseError("dataset: params.jsonl has " + std::to_string(ds.params.size()) + " rows, manifest says " +
                         std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.ppm", i);
        ds.images.push_back(load_ppm(dir / "images" / name));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Training

enum class OptimizerKind { sgd, adam };

NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::sgd, "sgd"}, {OptimizerKind::adam, "adam"}})

struct ImitatorTrainConfig {
    OptimizerKind optimizer = OptimizerKind::sgd;
    int epochs = 200;
    std::size_t batch_size = 32;  // 0 means full batch
    double lr = 1e-3;
    double lr_decay = 0.98;
    int decay_every = 30;
    SgdConfig sgd{};
    AdamConfig adam{};
    std::uint64_t seed = 1;
    bool shuffle = true;
    bool init_output_bias_to_mean = true;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ImitatorTrainConfig, optimizer, epochs, batch_size, lr, lr_decay,
                                                decay_every, sgd, adam, seed, shuffle, init_output_bias_to_mean)

/// Adapters so the config nests inside other JSON-mapped structs.
inline void to_json(nlohmann::json& j, const ImitatorConfig& c) { j = to_json(c); }
inline void from_json(const nlohmann::json& j, ImitatorConfig& c) { c = imitator_config_from_json(j); }

struct EpochStats {
    int epoch = 0;
    double train_l1 = 0.0;  // mean over mini-batches during the epoch
    double val_l1 = 0.0;
    double lr = 0.0;
};

namespace detail {

inline ad::Tensor params_batch(const RenderDataset& ds, const std::vector<std::size_t>& idx) {
    const std::size_t C = ds.params.at(idx.at(0)).continuous.size();
    std::vector<double> v;
    v.reserve(idx.size() * C);
    for (auto i : idx) v.insert(v.end(), ds.params[i].continuous.begin(), ds.params[i].continuous.end());
    return ad::Tensor::constant({idx.size(), C}, std::move(v));
}

inline ad::Tensor image_batch(const std::vector<RasterImage>& images, const std::vector<std::size_t>& idx) {
    const RasterImage& first = images.at(idx.at(0));
    std::vector<double> v;
    v.reserve(idx.size() * first.data.size());
    for (auto i : idx) {
        const auto chw = image_to_chw(images[i]);
        v.insert(v.end(), chw.begin(), chw.end());
    }
    return ad::Tensor::constant(
        {idx.size(), 3, static_cast<std::size_t>(first.height), static_cast<std::size_t>(first.width)}, std::move(v));
}

}  // namespace detail

/// Mean L1 of the model over images[idx] (inference mode), evaluated in chunks.
inline double imitator_l1(const ImitatorModel& model, const RenderDataset& ds, const std::vector<RasterImage>& images,
                          const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t s = 0; s < idx.size(); s += 64) {
        std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + 64)));
        const ad::Tensor pred = model.infer(detail::params_batch(ds, chunk));
        total += ad::l1_loss(pred, detail::image_batch(images, chunk)).item() * static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(idx.size());
}

/// L1 of predicting the per-pixel mean of the training images.
inline double mean_image_baseline(const RenderDataset& ds, const std::vector<RasterImage>& images) {
    const std::size_t m = images.at(0).data.size();
    std::vector<double> mean(m, 0.0);
    for (std::size_t i = 0; i < ds.n_train; ++i)
        for (std::size_t k = 0; k < m; ++k) mean[k] += images[i].data[k];
    for (auto& v : mean) v /= static_cast<double>(ds.n_train);
    double total = 0.0;
    for (std::size_t i = ds.n_train; i < ds.size(); ++i)
        for (std::size_t k = 0; k < m; ++k) total += std::abs(images[i].data[k] - mean[k]);
    return total / static_cast<double>(ds.n_val() * m);
}

struct ImitatorTrainResult {
    std::vector<EpochStats> history;
};

/// Minimizes mean L1 between the model output and the targets over the
/// training split. `targets` defaults to ds.images; controls pass permuted
/// images here.
inline ImitatorTrainResult train_imitator(ImitatorModel& model, const RenderDataset& ds,
                                          const ImitatorTrainConfig& cfg, const std::vector<RasterImage>* targets = nullptr,
                                          const std::function<void(const EpochStats&)>& on_epoch = {}) {
    if (ds.n_train == 0) throw ValidationError("train_imitator: empty training split");
    const std::vector<RasterImage>& images = targets ? *targets : ds.images;
    if (images.size() != ds.size()) throw ValidationError("train_imitator: target count mismatch");
    if (images[0].width != model.resolution())
        throw ShapeError("train_imitator: dataset resolution " + std::to_string(images[0].width) +
                         " does not match model resolution " + std::to_string(model.resolution()));

    std::vector<std::size_t> train_idx(ds.n_train), val_idx(ds.n_val());
    std::iota(train_idx.begin(), train_idx.end(), 0);
    std::iota(val_idx.begin(), val_idx.end(), ds.n_train);

    if (cfg.init_output_bias_to_mean) {
        auto& bias = model.output_bias().mutable_values();
        const std::size_t hw = images[0].data.size() / 3;
        for (int c = 0; c < 3; ++c) {
            double s = 0.0;
            for (auto i : train_idx)
                for (std::size_t q = 0; q < hw; ++q) s += images[i].data[q * 3 + c];
            bias[c] = s / static_cast<double>(train_idx.size() * hw);
        }
    }

    model.set_tracking(true);
    Sgd sgd(model.parameters(), cfg.sgd);
    Adam adam(model.parameters(), cfg.adam);
    Rng rng = Rng(cfg.seed).fork("imitator-train");
    const std::size_t bs = cfg.batch_size == 0 ? train_idx.size() : cfg.batch_size;
    ImitatorTrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr * std::pow(cfg.lr_decay, epoch / std::max(1, cfg.decay_every));
        if (cfg.shuffle)
            for (std::size_t i = train_idx.size(); i > 1; --i) std::swap(train_idx[i - 1], train_idx[rng.uniform_index(i)]);
        double sum = 0.0;
        for (std::size_t s = 0; s < train_idx.size(); s += bs) {
            std::vector<std::size_t> batch(train_idx.begin() + static_cast<std::ptrdiff_t>(s),
                                           train_idx.begin() + static_cast<std::ptrdiff_t>(std::min(train_idx.size(), s + bs)));
            model.zero_grad();
            const ad::Tensor loss =
                ad::l1_loss(model.forward(detail::params_batch(ds, batch), true), detail::image_batch(images, batch));
            if (!std::isfinite(loss.item()))
                throw DivergenceError("train_imitator: non-finite loss at epoch " + std::to_string(epoch));
            loss.backward();
            if (cfg.optimizer == OptimizerKind::sgd)
                sgd.step(lr);
            else
                adam.step(lr);
            sum += loss.item() * static_cast<double>(batch.size());
        }
        EpochStats st{epoch, sum / static_cast<double>(train_idx.size()), imitator_l1(model, ds, images, val_idx), lr};
        if (!std::isfinite(st.val_l1))
            throw DivergenceError("train_imitator: non-finite validation loss at epoch " + std::to_string(epoch));
        result.history.push_back(st);
        if (on_epoch) on_epoch(st);
    }
    model.set_tracking(false);
    return result;
}

}  // namespace t2p
