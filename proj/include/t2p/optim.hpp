#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "error.hpp"
#include "param_schema.hpp"
#include "tensor.hpp"

namespace t2p {

namespace detail {

// Optimizer state for units with zero gradient decays geometrically and
// would otherwise sink into subnormals, which are many times slower.
inline double flush_subnormal(double x) { return std::abs(x) < std::numeric_limits<double>::min() ? 0.0 : x; }

}  // namespace detail

struct SgdConfig {
    double momentum = 0.9;
    double weight_decay = 5e-4;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SgdConfig, momentum, weight_decay)

/// Momentum SGD. The L2 term is folded into the gradient before the
/// velocity update: v = mu v + (g + wd w); w -= lr v.
class Sgd {
public:
    Sgd(std::vector<ad::Tensor> params, SgdConfig config = {}) : params_(std::move(params)), config_(config) {
        for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
    }

    /// Applies one update. A non-finite gradient throws before anything is
    /// modified.
    void step(double lr) {
        for (std::size_t k = 0; k < params_.size(); ++k)
            for (double g : params_[k].grad())
                if (!std::isfinite(g)) throw DivergenceError("sgd: non-finite gradient in parameter " + std::to_string(k));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& w = params_[k].mutable_values();
            const auto& g = params_[k].grad();
            auto& v = velocity_[k];
            for (std::size_t i = 0; i < w.size(); ++i) {
                v[i] = detail::flush_subnormal(config_.momentum * v[i] + g[i] + config_.weight_decay * w[i]);
                w[i] -= lr * v[i];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    const std::vector<std::vector<double>>& velocity() const { return velocity_; }
    const std::vector<ad::Tensor>& params() const { return params_; }

private:
    std::vector<ad::Tensor> params_;
    SgdConfig config_;
    std::vector<std::vector<double>> velocity_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 folded into the gradient
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamConfig, beta1, beta2, eps, weight_decay)

class Adam {
public:
    Adam(std::vector<ad::Tensor> params, AdamConfig config = {}) : params_(std::move(params)), config_(config) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void step(double lr) {
        for (std::size_t k = 0; k < params_.size(); ++k)
            for (double g : params_[k].grad())
                if (!std::isfinite(g)) throw DivergenceError("adam: non-finite gradient in parameter " + std::to_string(k));
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, t_), c2 = 1.0 - std::pow(config_.beta2, t_);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& w = params_[k].mutable_values();
            const auto& g = params_[k].grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i] + config_.weight_decay * w[i];
                m_[k][i] = detail::flush_subnormal(config_.beta1 * m_[k][i] + (1 - config_.beta1) * gi);
                v_[k][i] = detail::flush_subnormal(config_.beta2 * v_[k][i] + (1 - config_.beta2) * gi * gi);
                w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + config_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<ad::Tensor> params_;
    AdamConfig config_;
    std::vector<std::vector<double>> m_, v_;
    int t_ = 0;
};

/// Cosine annealing with warm restarts. N_t runs 0..N and wraps, so one
/// cycle spans N + 1 evaluations and the snapshot point is N_t == N.
class SgdrSchedule {
public:
    SgdrSchedule(double eta_min, double eta_max, int period) : eta_min_(eta_min), eta_max_(eta_max), period_(period) {
        if (period < 1) throw ValidationError("sgdr: period must be >= 1");
        if (!(eta_min <= eta_max)) throw ValidationError("sgdr: eta_min must not exceed eta_max");
    }

    double lr() const {
        return eta_min_ + 0.5 * (eta_max_ - eta_min_) *
                              (1.0 + std::cos(std::numbers::pi * static_cast<double>(n_t_) / period_));
    }
    bool is_snapshot_point() const { return n_t_ == period_; }
    void advance() { n_t_ = n_t_ == period_ ? 0 : n_t_ + 1; }

    int n_t() const { return n_t_; }
    int period() const { return period_; }
    double eta_min() const { return eta_min_; }
    double eta_max() const { return eta_max_; }
    void set_n_t(int n) {
        if (n < 0 || n > period_) throw ValidationError("sgdr: N_t outside [0, N]");
        n_t_ = n;
    }

private:
    double eta_min_, eta_max_;
    int period_;
    int n_t_ = 0;
};

// Checkpoint file, all integers little-endian:
//   "T2PCKPT1"  u32 version  u32 count
//   per tensor: u32 name_len, name bytes, u32 rank, u64 dims[rank],
//               f64 values[prod(dims)]

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw ParseError("checkpoint: truncated");
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, in.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

inline std::string encode_checkpoint(const NamedTensors& tensors) {
    std::string out = "T2PCKPT1";
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) detail::put_le<std::uint64_t>(out, d);
        for (double v : t.values()) detail::put_le<double>(out, v);
    }
    return out;
}

inline std::map<std::string, ad::Tensor> decode_checkpoint(std::string_view bytes) {
    if (bytes.substr(0, 8) != "T2PCKPT1") throw ParseError("checkpoint: bad magic");
    std::size_t pos = 8;
    const auto version = detail::get_le<std::uint32_t>(bytes, pos);
    if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(bytes, pos);
    std::map<std::string, ad::Tensor> out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto len = detail::get_le<std::uint32_t>(bytes, pos);
        if (pos + len > bytes.size()) throw ParseError("checkpoint: truncated name");
        std::string name(bytes.substr(pos, len));
        pos += len;
        const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
        if (rank > 8) throw ParseError("checkpoint: implausible rank for '" + name + "'");
        ad::Shape shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(bytes, pos));
            n *= d;
        }
        if (n > (bytes.size() - pos) / sizeof(double)) throw ParseError("checkpoint: truncated values for '" + name + "'");
        std::vector<double> values(n);
        for (auto& v : values) v = detail::get_le<double>(bytes, pos);
        out.emplace(name, ad::Tensor::make(std::move(shape), std::move(values)));
    }
    return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
    write_text_file(path, encode_checkpoint(tensors));
}

/// Copies stored values into `tensors` in place. Every name must be present
/// with a matching shape.
inline void load_checkpoint_into(const std::filesystem::path& path, NamedTensors& tensors) {
    const auto stored = decode_checkpoint(read_text_file(path));
    for (auto& [name, t] : tensors) {
        auto it = stored.find(name);
        if (it == stored.end()) throw ParseError(path.string() + ": missing tensor '" + name + "'");
        if (it->second.shape() != t.shape())
            throw ShapeError(path.string() + ": tensor '" + name + "' has shape " + ad::shape_str(it->second.shape()) +
                             ", expected " + ad::shape_str(t.shape()));
        t.mutable_values() = it->second.values();
    }
}

}  // namespace t2p
