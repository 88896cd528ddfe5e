#pragma once

// Image/text embedding backends and the two-view prompt score.

#include <cmath>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "tensor.hpp"  // sets Eigen product options first
#pragma push_macro("_res")
#undef _res
#include <Eigen/Dense>
#pragma pop_macro("_res")

#include "engine.hpp"
#include "raster_tensor.hpp"

namespace t2p {

using Embedding = std::vector<double>;

inline double dot(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size())
        throw ShapeError("embedding dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double cosine(const Embedding& a, const Embedding& b) {
    const double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine: zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline Embedding normalized(Embedding v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw ValidationError("normalize: zero vector");
    for (double& x : v) x /= n;
    return v;
}

enum class BackendKind { synthetic, remote };

class EmbedderBackend {
public:
    virtual ~EmbedderBackend() = default;
    virtual BackendKind kind() const = 0;
    virtual std::size_t dim() const = 0;
    virtual bool differentiable() const = 0;
    virtual Embedding embed_image(const RasterImage& image) const = 0;
    virtual Embedding embed_text(const std::string& text) const = 0;
    /// Batch form; backends with a batched transport override it.
    virtual std::vector<Embedding> embed_texts(const std::vector<std::string>& texts) const {
        std::vector<Embedding> out;
        for (const auto& t : texts) out.push_back(embed_text(t));
        return out;
    }
    /// In-graph image embedding of a [3, H, W] tensor.
    virtual ad::Tensor embed_image_graph(const ad::Tensor&) const {
        throw Error("embedder: backend is not differentiable");
    }
};

/// Seeded sample over the schema with known rendering; the optimum of the
/// prompt "target:<seed>".
inline FacialParams synth_target_params(const ParamSchema& schema, std::uint64_t seed) {
    Rng rng(Rng::mix(seed, "target"));
    return sample_uniform(schema, rng);
}

struct SyntheticConfig {
    std::uint64_t projection_seed = 20240917;
    std::size_t dim = 64;
    std::size_t grid = 16;      // images are average-pooled to grid x grid x 3
    int resolution = 32;        // render size for "target:" prompts
    double pixel_center = 0.5;  // subtracted from pooled pixels before projection
};

/// Deterministic differentiable stand-in for an image/text encoder:
/// pool -> center -> fixed orthonormal projection -> L2 normalize.
class SyntheticEmbedder : public EmbedderBackend {
public:
    SyntheticEmbedder(ParamSchema schema, EngineLayout layout, SyntheticConfig config = {})
        : schema_(std::move(schema)), layout_(std::move(layout)), config_(config) {
        const std::size_t in = config_.grid * config_.grid * 3;
        if (config_.dim == 0 || config_.dim > in)
            throw ValidationError("synthetic embedder: dim must be in [1, " + std::to_string(in) + "]");
        // Orthonormal columns from the QR factorization of a Gaussian matrix,
        // stored [in, dim] so embedding is a plain matmul.
        Rng rng(config_.projection_seed);
        Eigen::MatrixXd g(in, config_.dim);
        for (Eigen::Index r = 0; r < g.rows(); ++r)
            for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = rng.normal();
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                                  Eigen::MatrixXd::Identity(g.rows(), g.cols());
        std::vector<double> t(in * config_.dim);
        for (std::size_t k = 0; k < in; ++k)
            for (std::size_t r = 0; r < config_.dim; ++r)
                t[k * config_.dim + r] = q(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(r));
        projection_ = ad::Tensor::constant({in, config_.dim}, std::move(t));
    }

    BackendKind kind() const override { return BackendKind::synthetic; }
    std::size_t dim() const override { return config_.dim; }
    bool differentiable() const override { return true; }
    const SyntheticConfig& config() const { return config_; }
    const ParamSchema& schema() const { return schema_; }
    const EngineLayout& layout() const { return layout_; }
    const ad::Tensor& projection() const { return projection_; }

    ad::Tensor embed_image_graph(const ad::Tensor& chw) const override {
        if (chw.rank() != 3 || chw.dim(0) != 3 || chw.dim(1) != chw.dim(2) || chw.dim(1) % config_.grid != 0)
            throw ShapeError("synthetic embedder: expected a square [3,H,W] image with H divisible by " +
                             std::to_string(config_.grid) + ", got " + ad::shape_str(chw.shape()));
        const ad::Tensor pooled = ad::avg_pool2d(chw, chw.dim(1) / config_.grid);
        const ad::Tensor flat = ad::reshape(add_scalar(pooled, -config_.pixel_center), {1, projection_.dim(0)});
        return ad::reshape(ad::l2_normalize(ad::matmul(flat, projection_)), {config_.dim});
    }

    Embedding embed_image(const RasterImage& image) const override {
        return embed_image_graph(image_to_tensor(image)).values();
    }

    /// "target:<seed>" anywhere in the text embeds the render of
    /// synth_target_params(seed); the side view when the text contains
    /// "side view of" or "|side". Other text maps to a hash-seeded direction.
    Embedding embed_text(const std::string& text) const override {
        if (text.empty()) throw ValidationError("embed_text: empty text");
        static const std::regex target_re(R"(target:(\d+))");
        std::smatch m;
        if (std::regex_search(text, m, target_re)) {
            const std::uint64_t seed = std::stoull(m[1].str());
            const bool side = text.find("side view of") != std::string::npos || text.find("|side") != std::string::npos;
            const FacialParams p = synth_target_params(schema_, seed);
            return embed_image(render(p, layout_, side ? View::side : View::front, config_.resolution));
        }
        Rng rng(Rng::mix(config_.projection_seed, text));
        Embedding v(config_.dim);
        for (auto& x : v) x = rng.normal();
        return normalized(std::move(v));
    }

private:
    ParamSchema schema_;
    EngineLayout layout_;
    SyntheticConfig config_;
    ad::Tensor projection_;
};

// ---------------------------------------------------------------------------
// Prompt ensembling

/// Twelve fill-in templates, all variations on the first.
inline std::vector<std::string> default_templates() {
    return {
        "{} head rendered in a game engine",
        "a 3D render of {} head",
        "a game character with {} face",
        "a rendering of {} head in a video game",
        "{} face of a game character",
        "a close-up render of {} head",
        "a portrait of {} in a game",
        "the head of {} rendered in 3D",
        "a character model of {} head",
        "a screenshot of {} face in a game",
        "a digital render of {} face",
        "{} head of an in-game character",
    };
}

inline std::string fill_template(const std::string& tmpl, const std::string& prompt) {
    const auto pos = tmpl.find("{}");
    if (pos == std::string::npos) throw ValidationError("template without '{}' placeholder: '" + tmpl + "'");
    return tmpl.substr(0, pos) + prompt + tmpl.substr(pos + 2);
}

/// Normalized mean of the embeddings of every filled template. With `side`,
/// each template is prefixed with "side view of ".
inline Embedding ensemble_prompt(const EmbedderBackend& backend, const std::string& prompt,
                                 const std::vector<std::string>& templates, bool side) {
    if (templates.empty()) throw ValidationError("ensemble_prompt: no templates");
    std::vector<std::string> texts;
    for (const auto& t : templates) texts.push_back(fill_template(side ? "side view of " + t : t, prompt));
    const auto embs = backend.embed_texts(texts);
    Embedding mean(backend.dim(), 0.0);
    for (const auto& e : embs)
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += e[i];
    for (double& v : mean) v /= static_cast<double>(embs.size());
    return normalized(std::move(mean));
}

/// Front and side-adjusted text embeddings of one prompt.
struct PromptEmbedding {
    std::string prompt;
    Embedding front;
    Embedding side;
};

inline PromptEmbedding embed_prompt(const EmbedderBackend& backend, const std::string& prompt,
                                    const std::vector<std::string>& templates = default_templates()) {
    return {prompt, ensemble_prompt(backend, prompt, templates, false), ensemble_prompt(backend, prompt, templates, true)};
}

struct ViewScores {
    double front = 0.0;
    double side = 0.0;
    double combined = 0.0;
};

/// alpha * cos(T, front render) + (1 - alpha) * cos(T', side render), both
/// views from the procedural engine.
inline ViewScores clip_score_views(const EmbedderBackend& backend, const PromptEmbedding& prompt,
                                   const FacialParams& params, const EngineLayout& layout, double alpha,
                                   int resolution) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("clip_score: alpha outside [0,1]");
    ViewScores s;
    s.front = cosine(prompt.front, backend.embed_image(render_front(params, layout, resolution)));
    s.side = alpha == 1.0 ? 0.0 : cosine(prompt.side, backend.embed_image(render_side(params, layout, resolution)));
    s.combined = alpha * s.front + (1.0 - alpha) * s.side;
    return s;
}

inline double clip_score(const EmbedderBackend& backend, const PromptEmbedding& prompt, const FacialParams& params,
                         const EngineLayout& layout, double alpha, int resolution) {
    return clip_score_views(backend, prompt, params, layout, alpha, resolution).combined;
}

}  // namespace t2p
