#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "fairqueue/harness.hpp"
#include "fairqueue/prompt_learner.hpp"

using namespace fairqueue;

namespace {

EmbeddingMatrix gaussian_rows(std::size_t r, std::size_t d, std::uint64_t seed, double scale = 1.0) {
    SeededRng rng(seed, 21);
    Matrix m(r, d);
    for (double& v : m.data) v = scale * rng.normal();
    return EmbeddingMatrix(std::move(m));
}

struct Instance {
    EmbeddingMatrix base;
    ReferenceSet refs;
    MeanPoolProjectionEncoder encoder;
    std::vector<EmbeddingMatrix> tokens;
};

Instance random_instance(std::uint64_t seed) {
    const std::size_t k = 2 + seed % 3, d = 6 + seed % 5, fd = 4 + seed % 4, q = 1 + seed % 3;
    Instance in{gaussian_rows(5, d, seed * 10 + 1), {}, MeanPoolProjectionEncoder(d, fd, seed), {}};
    for (std::size_t c = 0; c < k; ++c) {
        in.refs.categories.push_back(gaussian_rows(7, fd, seed * 10 + 2 + c));
        in.tokens.push_back(gaussian_rows(q, d, seed * 10 + 100 + c, 0.5));
    }
    return in;
}

// max_i |a_i - f_i| / max(|a_i|, |f_i|, 1e-3 * max|f|)
double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::fabs(v));
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), 1e-3 * scale});
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST(Learner, GradientMatchesCentralDifferences) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto in = random_instance(seed);
        const DirectionalObjective obj(in.base, in.refs, in.encoder);
        const auto grads = obj.gradient(in.tokens);
        std::vector<double> analytic, numeric;
        const double h = 1e-5;
        for (std::size_t k = 0; k < in.tokens.size(); ++k)
            for (std::size_t i = 0; i < in.tokens[k].data.data.size(); ++i) {
                auto plus = in.tokens, minus = in.tokens;
                plus[k].data.data[i] += h;
                minus[k].data.data[i] -= h;
                numeric.push_back((obj.value(plus) - obj.value(minus)) / (2.0 * h));
                analytic.push_back(grads[k].data[i]);
            }
        EXPECT_LT(max_relative_error(analytic, numeric), 1e-4) << "instance " << seed;
    }
}

TEST(Learner, ZeroIterationsReturnsInitialisation) {
    auto in = random_instance(3);
    LearnConfig cfg;
    cfg.iters = 0;
    cfg.q = 2;
    cfg.seed = 77;
    const auto res = learn_tokens(in.base, in.refs, in.encoder, cfg);
    ASSERT_EQ(res.loss_trace.size(), 1u);
    const auto init = initial_tokens(in.refs.category_count(), 2, in.base.dim(), cfg);
    ASSERT_EQ(res.tokens.size(), init.size());
    for (std::size_t k = 0; k < init.size(); ++k) {
        EXPECT_EQ(res.tokens[k].category, k);
        EXPECT_EQ(res.tokens[k].tokens.data, init[k].data);
    }
    EXPECT_DOUBLE_EQ(res.loss_trace[0], DirectionalObjective(in.base, in.refs, in.encoder).value(init));
}

TEST(Learner, InitialisationScale) {
    LearnConfig cfg;
    const auto init = initial_tokens(2, 3, 400, cfg);
    double ss = 0.0;
    for (double v : init[0].data.data) ss += v * v;
    EXPECT_NEAR(std::sqrt(ss / 1200.0), 0.02, 0.002);
}

TEST(Learner, RealizableReferencesConverge) {
    const ToyVocabulary vocab(16, 0);
    const auto base = vocab.encode("a headshot of a person");
    for (std::size_t k : {2u, 3u}) {
        const MeanPoolProjectionEncoder enc(16, 8, 5);
        const auto rr = realizable_references(base, enc, k, 200, 3, 9);
        LearnConfig cfg;  // lr 0.01, 2000 iterations, q 3
        const auto res = learn_tokens(base, rr.refs, enc, cfg);
        EXPECT_EQ(res.loss_trace.size(), 2001u);
        EXPECT_LT(res.loss_trace.back(), 1e-3) << "K=" << k;
        EXPECT_LE(res.loss_trace.back(), res.loss_trace.front());
    }
}

TEST(Learner, SmallStepGradientDescentTraceIsMonotone) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ToyVocabulary vocab(16, seed);
        const auto base = vocab.encode("a headshot of a person");
        const MeanPoolProjectionEncoder enc(16, 8, seed + 5);
        const auto rr = realizable_references(base, enc, 2 + seed % 2, 200, 3, seed);
        LearnConfig cfg;
        cfg.optimizer = Optimizer::GradientDescent;
        cfg.lr = 0.1;
        cfg.seed = seed;
        const auto res = learn_tokens(base, rr.refs, enc, cfg);
        std::size_t violations = 0;
        for (std::size_t i = 1; i < res.loss_trace.size(); ++i)
            if (res.loss_trace[i] > res.loss_trace[i - 1]) ++violations;
        EXPECT_EQ(violations, 0u) << "seed " << seed;
        EXPECT_LT(res.loss_trace.back(), 1e-3) << "seed " << seed;
    }
}

TEST(Learner, RealizableReferenceMeansAreExact) {
    const ToyVocabulary vocab(16, 0);
    const auto base = vocab.encode("a headshot of a person");
    const MeanPoolProjectionEncoder enc(16, 8, 5);
    const auto rr = realizable_references(base, enc, 2, 10, 3, 9);
    // Category directions equal the encoded target directions.
    const auto e0 = enc.encode(vstack({&base, &rr.target_tokens[0]}));
    const auto e1 = enc.encode(vstack({&base, &rr.target_tokens[1]}));
    const auto d_img = delta_direction(mean_embedding(rr.refs, 0), mean_embedding(rr.refs, 1));
    const auto d_txt = delta_direction(e0, e1);
    for (std::size_t i = 0; i < d_img.size(); ++i) EXPECT_NEAR(d_img[i], d_txt[i], 1e-12);
}

TEST(Learner, BaseRowsUntouched) {
    auto in = random_instance(5);
    const auto before = in.base;
    LearnConfig cfg;
    cfg.iters = 50;
    learn_tokens(in.base, in.refs, in.encoder, cfg);
    EXPECT_EQ(in.base, before);
}

TEST(Learner, DegenerateImageDirectionFailsBeforeTraining) {
    auto in = random_instance(2);
    in.refs.categories[1] = in.refs.categories[0];
    try {
        learn_tokens(in.base, in.refs, in.encoder, LearnConfig{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::DegenerateDirection);
    }
}

TEST(Learner, ConvergedTokensBeatHardPrompts) {
    const ToyVocabulary vocab(16, 0);
    const auto base = vocab.encode("a headshot of a person");
    const MeanPoolProjectionEncoder enc(16, 8, 5);
    const auto rr = realizable_references(base, enc, 2, 200, 3, 9);
    const auto res = learn_tokens(base, rr.refs, enc, LearnConfig{});
    const auto hard = hard_prompt_group(vocab, "smiling", {"smiling", "frowning"});
    const auto rows =
        direction_report(rr.refs, encode_categories(base, res.tokens, enc), encode_categories(base, hard.categories, enc));
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_LT(rows[0].learned_loss, 1e-3);
    EXPECT_GT(rows[0].hard_loss, rows[0].learned_loss);
}
