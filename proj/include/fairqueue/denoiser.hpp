#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fairqueue/embedding.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/numerics.hpp"
#include "fairqueue/prompt.hpp"

namespace fairqueue {

struct LayerShape {
    std::size_t height = 0;
    std::size_t width = 0;

    friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct DenoiserConfig {
    std::size_t latent_h = 16;
    std::size_t latent_w = 16;
    std::size_t channels = 8;
    std::vector<LayerShape> layers = {{16, 16}, {8, 8}};
    std::size_t steps = 50;
    std::size_t embed_dim = 16;
    std::size_t head_dim = 16;
    std::size_t planted_channel = 0;
    // Channel planted_channel + g carries attribute group g; these channels are
    // excluded from queries and from value mixing.
    std::size_t attribute_channels = 1;
    double beta = 0.5;   // planted-attribute bias
    double gamma = 0.1;  // residual mixing
    std::size_t image_h = 64;
    std::size_t image_w = 64;
    std::uint64_t weight_seed = 0;

    void validate() const {
        if (steps < 1) fail(ErrorKind::InvalidInput, "step count must be at least 1");
        if (latent_h == 0 || latent_w == 0 || channels == 0) fail(ErrorKind::InvalidInput, "empty latent");
        if (embed_dim == 0 || head_dim == 0) fail(ErrorKind::InvalidInput, "empty projection dims");
        if (layers.empty()) fail(ErrorKind::InvalidInput, "need at least one cross-attention layer");
        for (const auto& l : layers)
            if (l.height == 0 || l.width == 0 || latent_h % l.height != 0 || latent_w % l.width != 0)
                fail(ErrorKind::InvalidInput, "layer scales must divide the latent dims");
        if (planted_channel + attribute_channels > channels)
            fail(ErrorKind::InvalidInput, "attribute channels exceed channel count");
        if (image_h < latent_h || image_w < latent_w) fail(ErrorKind::InvalidInput, "image smaller than latent");
    }

    bool is_attribute_channel(std::size_t c) const {
        return c >= planted_channel && c < planted_channel + attribute_channels;
    }
};

/// Noisy latent Z_t, stored cell-major: values[(y * w + x) * channels + c].
struct LatentState {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> values;
    std::size_t step = 0;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;

    std::size_t cells() const { return height * width; }
    double& at(std::size_t cell, std::size_t c) { return values[cell * channels + c]; }
    double at(std::size_t cell, std::size_t c) const { return values[cell * channels + c]; }

    double channel_mean(std::size_t c) const {
        double s = 0.0;
        for (std::size_t i = 0; i < cells(); ++i) s += at(i, c);
        return s / static_cast<double>(cells());
    }

    friend bool operator==(const LatentState&, const LatentState&) = default;
};

/// Which token maps to scale after softmax, and by how much.
struct AttentionControl {
    double factor = 1.0;
    std::vector<std::size_t> tokens;

    bool is_identity() const { return factor == 1.0 || tokens.empty(); }

    friend bool operator==(const AttentionControl&, const AttentionControl&) = default;
};

/// Post-softmax maps of one layer, token-major: [token][row][col].
struct LayerMaps {
    std::size_t layer_id = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t tokens = 0;
    std::vector<float> raw;
    std::vector<float> effective;  // empty unless amplification was applied

    std::size_t cells() const { return height * width; }

    std::span<const float> raw_map(std::size_t token) const { return {raw.data() + token * cells(), cells()}; }
    std::span<const float> effective_map(std::size_t token) const {
        const auto& src = effective.empty() ? raw : effective;
        return {src.data() + token * cells(), cells()};
    }

    Grid2D grid(std::size_t token, bool use_effective = false) const {
        const auto m = use_effective ? effective_map(token) : raw_map(token);
        return Grid2D(height, width, std::vector<double>(m.begin(), m.end()));
    }

    friend bool operator==(const LayerMaps&, const LayerMaps&) = default;
};

struct AttentionRecord {
    std::size_t step = 0;
    std::size_t token_count = 0;
    std::vector<LayerMaps> layers;
    std::vector<std::size_t> amplified_tokens;
    double factor = 1.0;

    bool amplified() const { return !amplified_tokens.empty(); }

    friend bool operator==(const AttentionRecord&, const AttentionRecord&) = default;
};

struct AttentionWeights {
    Matrix query;  // head_dim x channels
    Matrix key;    // head_dim x embed_dim
    Matrix value;  // channels x embed_dim
};

struct LayerOutput {
    Matrix features;  // cells x channels, the attention-weighted value mix
    LayerMaps maps;
};

/// One cross-attention layer: queries from latent cells, keys and values from
/// prompt rows, softmax over tokens per cell. The control scales the chosen
/// token maps after softmax and before mixing values; other tokens are not
/// renormalised.
inline LayerOutput cross_attention_layer(const AttentionWeights& w, const Matrix& cell_features,
                                         const EmbeddingMatrix& prompt, const AttentionControl* control,
                                         std::size_t height, std::size_t width, std::size_t layer_id = 0) {
    if (prompt.dim() != w.key.cols || prompt.dim() != w.value.cols)
        fail(ErrorKind::InvalidPrompt, "prompt dim " + std::to_string(prompt.dim()) + " does not match projection input " +
                                           std::to_string(w.key.cols));
    if (cell_features.cols != w.query.cols || cell_features.rows != height * width)
        fail(ErrorKind::InvalidInput, "latent features do not match layer shape");
    const std::size_t r = prompt.rows();
    const std::size_t head = w.query.rows;
    const std::size_t channels = w.value.rows;
    const std::size_t cells = cell_features.rows;

    const Matrix keys = matmul(prompt.data, w.key.transpose());      // r x head
    const Matrix values = matmul(prompt.data, w.value.transpose());  // r x channels

    const bool amplify = control != nullptr && !control->is_identity();
    std::vector<double> gain(r, 1.0);
    if (amplify)
        for (std::size_t t : control->tokens) {
            if (t >= r) fail(ErrorKind::InvalidToken, "amplified token index out of range");
            gain[t] = control->factor;
        }

    LayerOutput out{Matrix(cells, channels), LayerMaps{layer_id, height, width, r, std::vector<float>(r * cells), {}}};
    if (amplify) out.maps.effective.resize(r * cells);

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head));
    std::vector<double> q(head), logits(r);
    for (std::size_t cell = 0; cell < cells; ++cell) {
        const auto f = cell_features.row(cell);
        for (std::size_t h = 0; h < head; ++h) q[h] = dot(w.query.row(h), f);
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < r; ++j) {
            logits[j] = dot(keys.row(j), q) * inv_sqrt;
            peak = std::max(peak, logits[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < r; ++j) total += (logits[j] = std::exp(logits[j] - peak));
        auto mixed = out.features.row(cell);
        for (std::size_t j = 0; j < r; ++j) {
            const double p = logits[j] / total;
            const double e = p * gain[j];
            out.maps.raw[j * cells + cell] = static_cast<float>(p);
            if (amplify) out.maps.effective[j * cells + cell] = static_cast<float>(e);
            const auto v = values.row(j);
            for (std::size_t c = 0; c < channels; ++c) mixed[c] += e * v[c];
        }
    }
    return out;
}

/// Decoded image, channel-major: values[(ch * height + y) * width + x].
struct Image {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    double channel_mean(std::size_t ch) const {
        const std::size_t n = height * width;
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += values[ch * n + i];
        return s / static_cast<double>(n);
    }

    friend bool operator==(const Image&, const Image&) = default;
};

struct StepResult {
    LatentState state;
    AttentionRecord record;
};

/// Step contract shared by the toy backend and any bridged real pipeline.
class DenoiserBackend {
public:
    virtual ~DenoiserBackend() = default;
    virtual std::size_t steps() const = 0;
    virtual LatentState initial_state(std::uint64_t seed, std::uint64_t stream) const = 0;
    virtual StepResult step(const LatentState& state, const ComposedPrompt& prompt, std::size_t t,
                            const AttentionControl* control) const = 0;
    virtual Image decode(const LatentState& state) const = 0;
};

/// Sign of the bias that category k of K plants: +1 for category 0 down to -1
/// for category K-1.
inline double category_sign(std::size_t category, std::size_t count) {
    if (count < 2) return 0.0;
    return 1.0 - 2.0 * static_cast<double>(category) / static_cast<double>(count - 1);
}

/// Untrained latent denoiser with fixed seeded weights. Attribute tokens plant
/// a category-signed bias in a reserved channel proportional to the attention
/// mass they receive.
class ToyDenoiser final : public DenoiserBackend {
public:
    explicit ToyDenoiser(DenoiserConfig config) : config_(std::move(config)) {
        config_.validate();
        const std::size_t C = config_.channels;
        for (std::size_t li = 0; li < config_.layers.size(); ++li) {
            SeededRng rng(config_.weight_seed, 0xA77E0000ULL + li);
            AttentionWeights w{Matrix(config_.head_dim, C), Matrix(config_.head_dim, config_.embed_dim),
                               Matrix(C, config_.embed_dim)};
            const double free_channels = static_cast<double>(C - config_.attribute_channels);
            for (std::size_t h = 0; h < config_.head_dim; ++h)
                for (std::size_t c = 0; c < C; ++c)
                    w.query(h, c) = config_.is_attribute_channel(c) ? 0.0 : rng.normal() / std::sqrt(std::max(1.0, free_channels));
            const double key_scale = 1.0 / std::sqrt(static_cast<double>(config_.embed_dim));
            for (double& v : w.key.data) v = key_scale * rng.normal();
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t d = 0; d < config_.embed_dim; ++d)
                    w.value(c, d) = config_.is_attribute_channel(c) ? 0.0 : key_scale * rng.normal();
            layers_.push_back(std::move(w));
        }
        SeededRng rng(config_.weight_seed, 0xDEC0DE);
        decoder_ = Matrix(3, C);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t c = 0; c < C; ++c) decoder_(ch, c) = 0.1 * rng.normal();
        decoder_(0, config_.planted_channel) = 1.0;
        decoder_bias_.resize(3);
        for (double& b : decoder_bias_) b = 0.1 * rng.normal();
    }

    const DenoiserConfig& config() const { return config_; }
    const std::vector<AttentionWeights>& layer_weights() const { return layers_; }
    const std::vector<double>& decoder_bias() const { return decoder_bias_; }
    std::size_t steps() const override { return config_.steps; }

    LatentState initial_state(std::uint64_t seed, std::uint64_t stream) const override {
        SeededRng rng(seed, stream);
        auto z = seeded_gaussian(rng, {config_.latent_h, config_.latent_w, config_.channels});
        return LatentState{config_.latent_h, config_.latent_w, config_.channels, std::move(z.values), 0, seed, stream};
    }

    StepResult step(const LatentState& state, const ComposedPrompt& prompt, std::size_t t,
                    const AttentionControl* control) const override {
        if (t >= config_.steps || state.step != t)
            fail(ErrorKind::TrajectoryExhausted, "step " + std::to_string(t) + " outside trajectory of " +
                                                     std::to_string(config_.steps) + " at state step " +
                                                     std::to_string(state.step));
        if (prompt.dim() != config_.embed_dim) fail(ErrorKind::InvalidPrompt, "prompt dim does not match backend");

        StepResult res{state, AttentionRecord{t, prompt.token_count(), {}, {}, 1.0}};
        if (control != nullptr && !control->is_identity()) {
            res.record.amplified_tokens = control->tokens;
            res.record.factor = control->factor;
        }
        LatentState& z = res.state;
        const std::size_t C = config_.channels;

        for (std::size_t li = 0; li < layers_.size(); ++li) {
            const auto [lh, lw] = config_.layers[li];
            const std::size_t fy = config_.latent_h / lh;
            const std::size_t fx = config_.latent_w / lw;
            const double pool = 1.0 / static_cast<double>(fy * fx);

            Matrix pooled(lh * lw, C);
            for (std::size_t y = 0; y < config_.latent_h; ++y)
                for (std::size_t x = 0; x < config_.latent_w; ++x) {
                    auto dst = pooled.row((y / fy) * lw + x / fx);
                    const std::size_t cell = y * config_.latent_w + x;
                    for (std::size_t c = 0; c < C; ++c) dst[c] += pool * z.at(cell, c);
                }

            LayerOutput out = cross_attention_layer(layers_[li], pooled, prompt.rows, control, lh, lw, li);

            // Attention mass on each attribute group, per layer cell.
            std::vector<std::vector<double>> mass;
            for (std::size_t g = 0; g < prompt.groups.size() && g < config_.attribute_channels; ++g) {
                const auto& span = prompt.groups[g];
                std::vector<double> m(lh * lw, 0.0);
                for (std::size_t tok = span.begin; tok < span.end; ++tok) {
                    const auto e = out.maps.effective_map(tok);
                    for (std::size_t i = 0; i < m.size(); ++i) m[i] += e[i];
                }
                mass.push_back(std::move(m));
            }

            for (std::size_t y = 0; y < config_.latent_h; ++y)
                for (std::size_t x = 0; x < config_.latent_w; ++x) {
                    const std::size_t cell = y * config_.latent_w + x;
                    const std::size_t src = (y / fy) * lw + x / fx;
                    const auto mixed = out.features.row(src);
                    for (std::size_t c = 0; c < C; ++c) z.at(cell, c) += config_.gamma * mixed[c];
                    for (std::size_t g = 0; g < mass.size(); ++g) {
                        const auto& span = prompt.groups[g];
                        z.at(cell, config_.planted_channel + g) +=
                            config_.beta * category_sign(span.category, span.category_count) * mass[g][src];
                    }
                }
            res.record.layers.push_back(std::move(out.maps));
        }
        z.step = t + 1;
        return res;
    }

    Image decode(const LatentState& state) const override {
        if (state.step != config_.steps)
            fail(ErrorKind::NotFinal, "decode at step " + std::to_string(state.step) + " of " +
                                          std::to_string(config_.steps));
        Image img{3, config_.image_h, config_.image_w, std::vector<double>(3 * config_.image_h * config_.image_w)};
        const std::size_t n = config_.image_h * config_.image_w;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            Grid2D g(state.height, state.width);
            for (std::size_t cell = 0; cell < state.cells(); ++cell) {
                double s = 0.0;
                for (std::size_t c = 0; c < state.channels; ++c) s += decoder_(ch, c) * state.at(cell, c);
                g.values[cell] = s;
            }
            const Grid2D up = bicubic_upscale(g, config_.image_h, config_.image_w);
            for (std::size_t i = 0; i < n; ++i) img.values[ch * n + i] = up.values[i] + decoder_bias_[ch];
        }
        return img;
    }

    /// Mean of the planted channel for attribute group g.
    double planted_mean(const LatentState& state, std::size_t group = 0) const {
        return state.channel_mean(config_.planted_channel + group);
    }

private:
    DenoiserConfig config_;
    std::vector<AttentionWeights> layers_;
    Matrix decoder_;
    std::vector<double> decoder_bias_;
};

}  // namespace fairqueue
