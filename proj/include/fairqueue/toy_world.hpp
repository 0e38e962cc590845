#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/embedding.hpp"
#include "fairqueue/numerics.hpp"
#include "fairqueue/prompt.hpp"

namespace fairqueue {

/// Word-level toy text embedding: each word hashes to a fixed seeded
/// Gaussian row.
class ToyVocabulary {
public:
    ToyVocabulary(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

    std::size_t dim() const { return dim_; }

    std::vector<double> word(const std::string& w) const {
        std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
        for (unsigned char ch : w) h = (h ^ ch) * 0x100000001B3ULL;
        SeededRng rng(seed_, h);
        std::vector<double> v(dim_);
        for (double& x : v) x = rng.normal();
        return v;
    }

    EmbeddingMatrix encode(const std::string& text) const {
        std::istringstream in(text);
        std::vector<std::string> words;
        for (std::string w; in >> w;) words.push_back(w);
        if (words.empty()) fail(ErrorKind::InvalidPrompt, "empty prompt text");
        Matrix m(words.size(), dim_);
        for (std::size_t i = 0; i < words.size(); ++i) {
            const auto v = word(words[i]);
            std::copy(v.begin(), v.end(), m.row(i).begin());
        }
        return EmbeddingMatrix(std::move(m), std::move(words));
    }

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

/// One attribute group whose category c uses the given words as its tokens.
inline TsaGroup hard_prompt_group(const ToyVocabulary& vocab, const std::string& name,
                                  const std::vector<std::string>& category_words) {
    TsaGroup g{name, {}};
    for (std::size_t k = 0; k < category_words.size(); ++k)
        g.categories.push_back({k, vocab.encode(category_words[k])});
    return g;
}

/// Stand-in learned tokens: q seeded Gaussian rows per category.
inline TsaGroup synthetic_token_group(const std::string& name, std::size_t categories, std::size_t q, std::size_t dim,
                                      std::uint64_t seed) {
    TsaGroup g{name, {}};
    for (std::size_t k = 0; k < categories; ++k) {
        SeededRng rng(seed, 0x70C0000ULL + k);
        Matrix m(q, dim);
        for (double& v : m.data) v = rng.normal();
        std::vector<std::string> labels;
        for (std::size_t r = 0; r < q; ++r) labels.push_back("S" + std::to_string(k) + "_" + std::to_string(r));
        g.categories.push_back({k, EmbeddingMatrix(std::move(m), std::move(labels))});
    }
    return g;
}

}  // namespace fairqueue
