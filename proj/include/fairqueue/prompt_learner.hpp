#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "fairqueue/embedding.hpp"
#include "fairqueue/numerics.hpp"
#include "fairqueue/prompt.hpp"

namespace fairqueue {

/// Maps a prompt (token rows) to one pooled vector in the reference feature
/// space, and back-propagates a gradient on that vector to the token rows.
class PromptEncoder {
public:
    virtual ~PromptEncoder() = default;
    virtual std::size_t input_dim() const = 0;
    virtual std::size_t output_dim() const = 0;
    virtual std::vector<double> encode(const EmbeddingMatrix& prompt) const = 0;
    virtual Matrix backward(const EmbeddingMatrix& prompt, std::span<const double> grad_out) const = 0;
};

/// Mean-pool over token rows followed by a fixed seeded linear projection.
class MeanPoolProjectionEncoder final : public PromptEncoder {
public:
    MeanPoolProjectionEncoder(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) : weights_(out_dim, in_dim) {
        SeededRng rng(seed, 0x7E47);
        const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
        for (double& w : weights_.data) w = scale * rng.normal();
    }

    explicit MeanPoolProjectionEncoder(Matrix weights) : weights_(std::move(weights)) {}

    std::size_t input_dim() const override { return weights_.cols; }
    std::size_t output_dim() const override { return weights_.rows; }
    const Matrix& weights() const { return weights_; }

    std::vector<double> encode(const EmbeddingMatrix& prompt) const override {
        if (prompt.dim() != input_dim()) fail(ErrorKind::InvalidPrompt, "prompt dim does not match encoder input");
        const auto pooled = prompt.mean_row();
        std::vector<double> out(output_dim(), 0.0);
        for (std::size_t r = 0; r < weights_.rows; ++r) out[r] = dot(weights_.row(r), pooled);
        return out;
    }

    Matrix backward(const EmbeddingMatrix& prompt, std::span<const double> grad_out) const override {
        std::vector<double> g(input_dim(), 0.0);
        for (std::size_t r = 0; r < weights_.rows; ++r)
            for (std::size_t c = 0; c < weights_.cols; ++c) g[c] += weights_(r, c) * grad_out[r];
        const double inv = 1.0 / static_cast<double>(prompt.rows());
        Matrix out(prompt.rows(), input_dim());
        for (std::size_t i = 0; i < prompt.rows(); ++i)
            for (std::size_t c = 0; c < input_dim(); ++c) out(i, c) = g[c] * inv;
        return out;
    }

private:
    Matrix weights_;
};

/// Mean directional loss over all unordered category pairs, as a function of
/// the per-category token blocks appended to a fixed base prompt.
class DirectionalObjective {
public:
    DirectionalObjective(const EmbeddingMatrix& base, const ReferenceSet& refs, const PromptEncoder& encoder)
        : base_(base), encoder_(encoder) {
        refs.validate();
        if (encoder.output_dim() != refs.categories.front().dim())
            fail(ErrorKind::InvalidInput, "encoder output dim does not match reference features");
        if (encoder.input_dim() != base.dim()) fail(ErrorKind::InvalidInput, "encoder input dim does not match base");
        const std::size_t k = refs.category_count();
        std::vector<std::vector<double>> alpha;
        for (std::size_t c = 0; c < k; ++c) alpha.push_back(mean_embedding(refs, c));
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = i + 1; j < k; ++j) {
                auto d = delta_direction(alpha[i], alpha[j]);
                if (!(norm(d) > 0.0))
                    fail(ErrorKind::DegenerateDirection, "categories " + std::to_string(i) + " and " +
                                                             std::to_string(j) + " have identical mean features");
                pairs_.push_back({i, j, std::move(d)});
            }
        categories_ = k;
    }

    std::size_t category_count() const { return categories_; }

    EmbeddingMatrix prompt_for(const EmbeddingMatrix& tokens) const { return vstack({&base_, &tokens}); }

    double value(const std::vector<EmbeddingMatrix>& tokens) const {
        const auto enc = encode_all(tokens);
        double total = 0.0;
        for (const auto& p : pairs_) total += directional_loss(p.image_delta, delta_direction(enc[p.i], enc[p.j]));
        return total / static_cast<double>(pairs_.size());
    }

    /// Exact gradient of value() with respect to every token row.
    std::vector<Matrix> gradient(const std::vector<EmbeddingMatrix>& tokens) const {
        const auto enc = encode_all(tokens);
        const std::size_t out_dim = encoder_.output_dim();
        std::vector<std::vector<double>> grad_enc(categories_, std::vector<double>(out_dim, 0.0));
        const double weight = 1.0 / static_cast<double>(pairs_.size());
        for (const auto& p : pairs_) {
            const auto dp = delta_direction(enc[p.i], enc[p.j]);
            const double na = norm(p.image_delta);
            const double nb = norm(dp);
            if (!(nb > 0.0)) fail(ErrorKind::DegenerateDirection, "prompt direction collapsed to zero");
            const double cos = dot(p.image_delta, dp) / (na * nb);
            for (std::size_t c = 0; c < out_dim; ++c) {
                // d(1 - cos)/d(dp)
                const double g = -(p.image_delta[c] / (na * nb) - cos * dp[c] / (nb * nb)) * weight;
                grad_enc[p.i][c] += g;
                grad_enc[p.j][c] -= g;
            }
        }
        std::vector<Matrix> grads;
        for (std::size_t k = 0; k < categories_; ++k) {
            const auto prompt = prompt_for(tokens[k]);
            const Matrix full = encoder_.backward(prompt, grad_enc[k]);
            Matrix g(tokens[k].rows(), tokens[k].dim());
            for (std::size_t r = 0; r < g.rows; ++r)
                for (std::size_t c = 0; c < g.cols; ++c) g(r, c) = full(base_.rows() + r, c);
            grads.push_back(std::move(g));
        }
        return grads;
    }

private:
    struct Pair {
        std::size_t i, j;
        std::vector<double> image_delta;
    };

    std::vector<std::vector<double>> encode_all(const std::vector<EmbeddingMatrix>& tokens) const {
        if (tokens.size() != categories_) fail(ErrorKind::InvalidInput, "need one token block per category");
        std::vector<std::vector<double>> enc;
        for (const auto& t : tokens) enc.push_back(encoder_.encode(prompt_for(t)));
        return enc;
    }

    const EmbeddingMatrix& base_;
    const PromptEncoder& encoder_;
    std::vector<Pair> pairs_;
    std::size_t categories_ = 0;
};

enum class Optimizer { Adam, GradientDescent };

struct LearnConfig {
    Optimizer optimizer = Optimizer::Adam;
    double lr = 0.01;
    std::size_t iters = 2000;
    std::size_t q = 3;
    double init_std = 0.02;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct LearnResult {
    std::vector<LearnedTokens> tokens;
    std::vector<double> loss_trace;  // loss at iterate 0..iters
};

inline std::vector<EmbeddingMatrix> initial_tokens(std::size_t categories, std::size_t q, std::size_t dim,
                                                   const LearnConfig& config) {
    std::vector<EmbeddingMatrix> tokens;
    for (std::size_t k = 0; k < categories; ++k) {
        SeededRng rng(config.seed, 0x5EED0000ULL + k);
        Matrix m(q, dim);
        for (double& v : m.data) v = config.init_std * rng.normal();
        std::vector<std::string> labels;
        for (std::size_t r = 0; r < q; ++r) labels.push_back("S" + std::to_string(k) + "_" + std::to_string(r));
        tokens.emplace_back(std::move(m), std::move(labels));
    }
    return tokens;
}

/// Learns q tokens per category so prompt directions follow image directions.
/// Full-batch Adam on the exact gradient by default, plain gradient descent on
/// request. The base prompt is never modified.
inline LearnResult learn_tokens(const EmbeddingMatrix& base, const ReferenceSet& refs, const PromptEncoder& encoder,
                                const LearnConfig& config) {
    if (config.q == 0) fail(ErrorKind::InvalidInput, "token length q must be at least 1");
    const DirectionalObjective objective(base, refs, encoder);
    auto tokens = initial_tokens(objective.category_count(), config.q, base.dim(), config);

    std::vector<Matrix> m1, m2;
    for (const auto& t : tokens) {
        m1.emplace_back(t.rows(), t.dim());
        m2.emplace_back(t.rows(), t.dim());
    }

    LearnResult result;
    result.loss_trace.push_back(objective.value(tokens));
    double bias1 = 1.0, bias2 = 1.0;
    for (std::size_t it = 0; it < config.iters; ++it) {
        const auto grads = objective.gradient(tokens);
        bias1 *= config.beta1;
        bias2 *= config.beta2;
        for (std::size_t k = 0; k < tokens.size(); ++k) {
            auto& w = tokens[k].data.data;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g = grads[k].data[i];
                if (config.optimizer == Optimizer::GradientDescent) {
                    w[i] -= config.lr * g;
                    continue;
                }
                m1[k].data[i] = config.beta1 * m1[k].data[i] + (1.0 - config.beta1) * g;
                m2[k].data[i] = config.beta2 * m2[k].data[i] + (1.0 - config.beta2) * g * g;
                const double mhat = m1[k].data[i] / (1.0 - bias1);
                const double vhat = m2[k].data[i] / (1.0 - bias2);
                w[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
            }
        }
        result.loss_trace.push_back(objective.value(tokens));
    }

    for (std::size_t k = 0; k < tokens.size(); ++k) result.tokens.push_back({k, std::move(tokens[k])});
    return result;
}

/// Encoded per-category prompts [base; tokens_k], for direction_report().
inline std::vector<std::vector<double>> encode_categories(const EmbeddingMatrix& base,
                                                          const std::vector<LearnedTokens>& tokens,
                                                          const PromptEncoder& encoder) {
    std::vector<std::vector<double>> out;
    for (const auto& t : tokens) out.push_back(encoder.encode(vstack({&base, &t.tokens})));
    return out;
}

}  // namespace fairqueue
