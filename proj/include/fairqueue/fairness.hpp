#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/numerics.hpp"

namespace fairqueue {

struct CategoryDistribution {
    std::vector<std::size_t> counts;

    std::size_t categories() const { return counts.size(); }
    std::size_t total() const {
        std::size_t n = 0;
        for (auto c : counts) n += c;
        return n;
    }

    static CategoryDistribution from_predictions(const std::vector<std::size_t>& predictions, std::size_t k) {
        if (k < 2) fail(ErrorKind::InvalidInput, "need at least two categories");
        CategoryDistribution d{std::vector<std::size_t>(k, 0)};
        for (auto p : predictions) {
            if (p >= k) fail(ErrorKind::InvalidInput, "prediction outside category range");
            ++d.counts[p];
        }
        return d;
    }
};

/// L2 distance between the empirical category distribution and uniform.
/// Bounded by sqrt((K-1)/K).
inline double fairness_discrepancy(const CategoryDistribution& dist) {
    const std::size_t k = dist.categories();
    if (k < 2) fail(ErrorKind::InvalidInput, "need at least two categories");
    const std::size_t n = dist.total();
    if (n == 0) fail(ErrorKind::EmptySample, "no samples to measure");
    const double uniform = 1.0 / static_cast<double>(k);
    double s = 0.0;
    for (auto c : dist.counts) {
        const double d = static_cast<double>(c) / static_cast<double>(n) - uniform;
        s += d * d;
    }
    return std::sqrt(s);
}

/// Mean cosine between each image feature and the base-prompt embedding.
inline double text_alignment(const std::vector<std::vector<double>>& features, std::span<const double> base_embedding) {
    if (features.empty()) fail(ErrorKind::EmptySample, "no features");
    double s = 0.0;
    for (const auto& f : features) {
        if (f.size() != base_embedding.size()) fail(ErrorKind::InvalidInput, "feature dim mismatch");
        if (!(norm(f) > 0.0)) fail(ErrorKind::DegenerateFeature, "zero-norm image feature");
        if (!(norm(base_embedding) > 0.0)) fail(ErrorKind::DegenerateFeature, "zero-norm base embedding");
        s += cosine_similarity(f, base_embedding);
    }
    return s / static_cast<double>(features.size());
}

struct GaussianStats {
    std::vector<double> mean;
    Matrix cov;
};

/// Sample mean and unbiased covariance plus ridge * I.
inline GaussianStats gaussian_stats(const Matrix& feats, double ridge = 1e-6) {
    if (feats.rows < 2) fail(ErrorKind::InvalidInput, "need at least two samples for a covariance");
    const std::size_t n = feats.rows, d = feats.cols;
    GaussianStats g{std::vector<double>(d, 0.0), Matrix(d, d)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) g.mean[c] += feats(i, c);
    for (double& m : g.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            const double da = feats(i, a) - g.mean[a];
            for (std::size_t b = a; b < d; ++b) g.cov(a, b) += da * (feats(i, b) - g.mean[b]);
        }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            g.cov(a, b) /= static_cast<double>(n - 1);
            g.cov(b, a) = g.cov(a, b);
        }
    for (std::size_t a = 0; a < d; ++a) g.cov(a, a) += ridge;
    return g;
}

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with the cross term taken as
/// Tr((S1^{1/2} S2 S1^{1/2})^{1/2}), which has the same eigenvalues.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mean.size() != b.mean.size()) fail(ErrorKind::InvalidInput, "feature dim mismatch");
    const std::size_t d = a.mean.size();
    double shift = 0.0;
    for (std::size_t i = 0; i < d; ++i) shift += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
    const Matrix root_a = matrix_sqrt_psd(a.cov);
    Matrix inner = matmul(matmul(root_a, b.cov), root_a);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) inner(i, j) = inner(j, i) = 0.5 * (inner(i, j) + inner(j, i));
    const Matrix cross = matrix_sqrt_psd(inner);
    double tr = 0.0;
    for (std::size_t i = 0; i < d; ++i) tr += a.cov(i, i) + b.cov(i, i) - 2.0 * cross(i, i);
    return std::max(0.0, shift + tr);
}

inline double frechet_distance(const Matrix& feats_a, const Matrix& feats_b, double ridge = 1e-6) {
    if (feats_a.cols != feats_b.cols) fail(ErrorKind::InvalidInput, "feature dim mismatch");
    return frechet_distance(gaussian_stats(feats_a, ridge), gaussian_stats(feats_b, ridge));
}

struct SemanticDistance {
    std::vector<std::pair<std::string, double>> per_pair;
    double mean = 0.0;
};

/// 1 - cos per sample id shared by both sets; every generated id needs a reference.
inline SemanticDistance semantic_distance(const std::map<std::string, std::vector<double>>& reference,
                                          const std::map<std::string, std::vector<double>>& generated) {
    if (generated.empty()) fail(ErrorKind::EmptySample, "no generated features");
    SemanticDistance out;
    double total = 0.0;
    for (const auto& [id, g] : generated) {
        const auto it = reference.find(id);
        if (it == reference.end()) fail(ErrorKind::MissingPair, "no reference for sample " + id);
        if (!(norm(g) > 0.0) || !(norm(it->second) > 0.0)) fail(ErrorKind::DegenerateFeature, "zero-norm feature " + id);
        const double d = 1.0 - cosine_similarity(it->second, g);
        out.per_pair.emplace_back(id, d);
        total += d;
    }
    out.mean = total / static_cast<double>(out.per_pair.size());
    return out;
}

/// Aggregates externally computed per-sample scores.
inline double mean_score(const std::vector<std::pair<std::string, double>>& scores) {
    if (scores.empty()) fail(ErrorKind::EmptySample, "empty score file");
    double s = 0.0;
    for (const auto& [id, v] : scores) s += v;
    return s / static_cast<double>(scores.size());
}

class FeatureProvider {
public:
    virtual ~FeatureProvider() = default;
    virtual std::string name() const = 0;
    virtual std::size_t dim() const = 0;
    virtual std::vector<double> features(const Image& image) const = 0;
};

/// Flattened image through a fixed seeded projection, unit-normalised.
class ToyFeatureProvider final : public FeatureProvider {
public:
    ToyFeatureProvider(std::size_t image_h, std::size_t image_w, std::size_t dim = 16, std::uint64_t seed = 0)
        : h_(image_h), w_(image_w), proj_(dim, 3 * image_h * image_w) {
        SeededRng rng(seed, 0xFEA7);
        const double scale = 1.0 / std::sqrt(static_cast<double>(proj_.cols));
        for (double& v : proj_.data) v = scale * rng.normal();
    }

    std::string name() const override { return "toy"; }
    std::size_t dim() const override { return proj_.rows; }

    std::vector<double> features(const Image& image) const override {
        if (image.values.size() != proj_.cols) fail(ErrorKind::InvalidInput, "image size does not match provider");
        std::vector<double> f(proj_.rows);
        for (std::size_t r = 0; r < proj_.rows; ++r) f[r] = dot(proj_.row(r), image.values);
        const double n = norm(f);
        if (!(n > 0.0)) fail(ErrorKind::DegenerateFeature, "image maps to a zero feature");
        for (double& v : f) v /= n;
        return f;
    }

private:
    std::size_t h_, w_;
    Matrix proj_;
};

class ClassifierInterface {
public:
    virtual ~ClassifierInterface() = default;
    virtual std::string name() const = 0;
    virtual std::size_t categories() const = 0;
    virtual std::size_t classify(const Image& image) const = 0;
};

/// Thresholds the channel-0 mean. Cuts are descending; the category is the
/// number of cuts strictly above the value, so a value on a cut goes to the
/// lower category index.
class ToyClassifier final : public ClassifierInterface {
public:
    explicit ToyClassifier(std::vector<double> cuts) : cuts_(std::move(cuts)) {
        if (cuts_.empty()) fail(ErrorKind::InvalidInput, "classifier needs at least one cut");
        std::sort(cuts_.begin(), cuts_.end(), std::greater<>());
    }

    /// Quantile cuts over calibration statistics; K = 2 gives the median.
    static ToyClassifier calibrate(std::vector<double> statistics, std::size_t k = 2) {
        if (statistics.empty()) fail(ErrorKind::EmptySample, "empty calibration set");
        if (k < 2) fail(ErrorKind::InvalidInput, "need at least two categories");
        std::sort(statistics.begin(), statistics.end());
        std::vector<double> cuts;
        for (std::size_t i = 1; i < k; ++i) {
            const double q = 1.0 - static_cast<double>(i) / static_cast<double>(k);
            const double pos = q * static_cast<double>(statistics.size() - 1);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, statistics.size() - 1);
            cuts.push_back(statistics[lo] + (pos - static_cast<double>(lo)) * (statistics[hi] - statistics[lo]));
        }
        return ToyClassifier(std::move(cuts));
    }

    static double statistic(const Image& image) { return image.channel_mean(0); }

    std::string name() const override { return "toy"; }
    std::size_t categories() const override { return cuts_.size() + 1; }
    const std::vector<double>& cuts() const { return cuts_; }

    std::size_t classify_value(double v) const {
        std::size_t k = 0;
        for (double c : cuts_)
            if (v < c) ++k;
        return k;
    }

    std::size_t classify(const Image& image) const override { return classify_value(statistic(image)); }

private:
    std::vector<double> cuts_;
};

}  // namespace fairqueue
