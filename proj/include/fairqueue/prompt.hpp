#pragma once

#include <algorithm>

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fairqueue/embedding.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/numerics.hpp"

namespace fairqueue {

/// q learned tokens standing for one category of a sensitive attribute.
struct LearnedTokens {
    std::size_t category = 0;
    EmbeddingMatrix tokens;

    std::size_t length() const { return tokens.rows(); }
};

/// All categories of one sensitive attribute, indexed by category.
struct TsaGroup {
    std::string name;
    std::vector<LearnedTokens> categories;
};

/// Base prompt rows followed by one token block per sensitive attribute.
struct ComposedPrompt {
    struct GroupSpan {
        std::size_t begin = 0;  // row index, inclusive
        std::size_t end = 0;    // exclusive
        std::size_t category = 0;
        std::size_t category_count = 0;

        friend bool operator==(const GroupSpan&, const GroupSpan&) = default;
    };

    EmbeddingMatrix rows;
    std::size_t base_rows = 0;
    std::vector<GroupSpan> groups;

    /// A prompt without appended attribute tokens.
    static ComposedPrompt plain(EmbeddingMatrix m) {
        ComposedPrompt p;
        p.base_rows = m.rows();
        p.rows = std::move(m);
        return p;
    }

    std::size_t token_count() const { return rows.rows(); }
    std::size_t dim() const { return rows.dim(); }

    /// Half-open row range covering every appended attribute token.
    std::pair<std::size_t, std::size_t> tsa_token_range() const { return {base_rows, rows.rows()}; }

    std::vector<std::size_t> tsa_tokens() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = base_rows; i < rows.rows(); ++i) idx.push_back(i);
        return idx;
    }

    friend bool operator==(const ComposedPrompt&, const ComposedPrompt&) = default;
};

/// Appends the selected category's tokens of every group, in group order.
inline ComposedPrompt compose_prompt(const EmbeddingMatrix& base, const std::vector<TsaGroup>& groups,
                                     const std::vector<std::size_t>& selections) {
    if (selections.size() != groups.size())
        fail(ErrorKind::InvalidSelection, "need exactly one category selection per attribute group");
    ComposedPrompt out;
    out.base_rows = base.rows();
    std::vector<const EmbeddingMatrix*> parts{&base};
    std::size_t at = base.rows();
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& cats = groups[g].categories;
        const std::size_t k = selections[g];
        if (k >= cats.size())
            fail(ErrorKind::InvalidSelection, "category " + std::to_string(k) + " missing in group " + groups[g].name);
        const auto& tokens = cats[k].tokens;
        if (tokens.dim() != base.dim()) fail(ErrorKind::InvalidSelection, "token dim does not match base prompt dim");
        parts.push_back(&tokens);
        out.groups.push_back({at, at + tokens.rows(), k, cats.size()});
        at += tokens.rows();
    }
    out.rows = vstack(parts);
    return out;
}

/// Labelled image features per category (the reference set).
struct ReferenceSet {
    std::vector<EmbeddingMatrix> categories;

    std::size_t category_count() const { return categories.size(); }

    void validate() const {
        if (categories.size() < 2) fail(ErrorKind::InvalidInput, "reference set needs at least two categories");
        const std::size_t d = categories.front().dim();
        for (const auto& c : categories) {
            if (c.rows() == 0) fail(ErrorKind::EmptyCategory, "reference category is empty");
            if (c.dim() != d) fail(ErrorKind::InvalidInput, "reference feature dims differ");
        }
    }
};

inline std::vector<double> mean_embedding(const ReferenceSet& refs, std::size_t category) {
    if (category >= refs.categories.size()) fail(ErrorKind::EmptyCategory, "no such category");
    const auto& feats = refs.categories[category];
    if (feats.rows() == 0) fail(ErrorKind::EmptyCategory, "category has no features");
    return feats.mean_row();
}

inline std::vector<double> delta_direction(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) fail(ErrorKind::InvalidInput, "delta_direction dimension mismatch");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return d;
}

/// 1 - cos(dI, dP); zero means the two directions agree.
/// Evaluated as |a/|a| - b/|b||^2 / 2, which equals 1 - cos but keeps full
/// relative precision near zero instead of bottoming out at one ulp of 1.
inline double directional_loss(std::span<const double> image_delta, std::span<const double> prompt_delta) {
    if (image_delta.size() != prompt_delta.size()) fail(ErrorKind::InvalidInput, "directional loss dimension mismatch");
    const double na = norm(image_delta), nb = norm(prompt_delta);
    if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorKind::DegenerateDirection, "directional loss of a zero-norm vector");
    double s = 0.0;
    for (std::size_t i = 0; i < image_delta.size(); ++i) {
        const double d = image_delta[i] / na - prompt_delta[i] / nb;
        s += d * d;
    }
    return std::min(0.5 * s, 2.0);
}

struct DirectionRow {
    std::size_t i = 0;
    std::size_t j = 0;
    double learned_loss = 0.0;  // L_dir(dI, dP)
    double hard_loss = 0.0;     // L_dir(dI, dF)
};

/// Per unordered category pair: how well learned-prompt and hard-prompt
/// directions line up with the image direction. Inputs are per-category
/// vectors in the reference feature space.
inline std::vector<DirectionRow> direction_report(const ReferenceSet& refs,
                                                  const std::vector<std::vector<double>>& learned_embeddings,
                                                  const std::vector<std::vector<double>>& hard_embeddings) {
    refs.validate();
    const std::size_t k = refs.category_count();
    if (learned_embeddings.size() != k || hard_embeddings.size() != k)
        fail(ErrorKind::InvalidInput, "direction sources must cover every category");
    std::vector<std::vector<double>> alpha;
    for (std::size_t c = 0; c < k; ++c) alpha.push_back(mean_embedding(refs, c));
    std::vector<DirectionRow> rows;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) {
            const auto di = delta_direction(alpha[i], alpha[j]);
            rows.push_back({i, j, directional_loss(di, delta_direction(learned_embeddings[i], learned_embeddings[j])),
                            directional_loss(di, delta_direction(hard_embeddings[i], hard_embeddings[j]))});
        }
    return rows;
}

}  // namespace fairqueue
