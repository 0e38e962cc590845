#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairqueue/error.hpp"
#include "fairqueue/numerics.hpp"

namespace fairqueue {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// A p x d block of token embeddings or an N x d batch of features.
/// Row labels and per-row category tags are optional metadata.
struct EmbeddingMatrix {
    Matrix data;
    std::vector<std::string> labels;
    std::vector<int> categories;

    EmbeddingMatrix() = default;
    explicit EmbeddingMatrix(Matrix m, std::vector<std::string> row_labels = {}, std::vector<int> row_categories = {})
        : data(std::move(m)), labels(std::move(row_labels)), categories(std::move(row_categories)) {
        validate();
    }

    std::size_t rows() const { return data.rows; }
    std::size_t dim() const { return data.cols; }
    std::span<const double> row(std::size_t i) const { return data.row(i); }
    std::span<double> row(std::size_t i) { return data.row(i); }

    void validate() const {
        if (data.rows == 0 || data.cols == 0) fail(ErrorKind::InvalidInput, "embedding matrix must be nonempty");
        for (double v : data.data)
            if (!std::isfinite(v)) fail(ErrorKind::InvalidInput, "embedding values must be finite");
        if (!labels.empty() && labels.size() != data.rows)
            fail(ErrorKind::InvalidInput, "label count does not match row count");
        if (!categories.empty() && categories.size() != data.rows)
            fail(ErrorKind::InvalidInput, "category count does not match row count");
    }

    std::vector<double> mean_row() const {
        std::vector<double> m(dim(), 0.0);
        for (std::size_t r = 0; r < rows(); ++r)
            for (std::size_t c = 0; c < dim(); ++c) m[c] += data(r, c);
        for (double& v : m) v /= static_cast<double>(rows());
        return m;
    }

    friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

/// Stacks matrices of equal width.
inline EmbeddingMatrix vstack(const std::vector<const EmbeddingMatrix*>& parts) {
    if (parts.empty()) fail(ErrorKind::InvalidInput, "nothing to stack");
    const std::size_t d = parts.front()->dim();
    std::size_t total = 0;
    bool labelled = true;
    for (const auto* p : parts) {
        if (p->dim() != d) fail(ErrorKind::InvalidPrompt, "embedding dimension mismatch");
        total += p->rows();
        labelled = labelled && p->labels.size() == p->rows();
    }
    Matrix m(total, d);
    std::vector<std::string> labels;
    std::size_t at = 0;
    for (const auto* p : parts) {
        std::copy(p->data.data.begin(), p->data.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(at * d));
        at += p->rows();
        if (labelled) labels.insert(labels.end(), p->labels.begin(), p->labels.end());
    }
    return EmbeddingMatrix(std::move(m), std::move(labels));
}

namespace fqem {

inline constexpr char kMagic[4] = {'F', 'Q', 'E', 'M'};
inline constexpr std::uint32_t kVersion = 1;

inline std::filesystem::path manifest_path(const std::filesystem::path& p) {
    auto m = p;
    m += ".json";
    return m;
}

namespace detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t get_u32(std::ifstream& in, const std::filesystem::path& p) {
    std::uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) fail(ErrorKind::Format, "truncated header in " + p.string());
    return v;
}

}  // namespace detail

/// Writes the binary block plus the adjacent "<path>.json" manifest.
/// Values are narrowed to 32-bit floats.
inline void write(const std::filesystem::path& path, const EmbeddingMatrix& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
    out.write(kMagic, 4);
    detail::put_u32(out, kVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.dim()));
    std::vector<float> payload(m.data.data.size());
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(m.data.data[i]);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
    if (!out) fail(ErrorKind::Io, "write failed: " + path.string());

    nlohmann::json manifest = {{"rows", m.rows()}, {"dim", m.dim()}, {"labels", m.labels}, {"categories", m.categories}};
    std::ofstream js(manifest_path(path));
    if (!js) fail(ErrorKind::Io, "cannot open for writing: " + manifest_path(path).string());
    js << manifest.dump(2) << '\n';
}

/// Reads a block; the manifest is optional and only supplies metadata.
inline EmbeddingMatrix read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open: " + path.string());
    char magic[4] = {};
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        fail(ErrorKind::Format, "bad FQEM magic in " + path.string());
    const std::uint32_t version = detail::get_u32(in, path);
    if (version != kVersion)
        fail(ErrorKind::UnsupportedVersion, "FQEM version " + std::to_string(version) + " in " + path.string());
    const std::uint32_t rows = detail::get_u32(in, path);
    const std::uint32_t dim = detail::get_u32(in, path);
    std::vector<float> payload(static_cast<std::size_t>(rows) * dim);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
    if (static_cast<std::size_t>(in.gcount()) != payload.size() * 4)
        fail(ErrorKind::LengthMismatch, "truncated FQEM payload in " + path.string());
    in.peek();
    if (!in.eof()) fail(ErrorKind::LengthMismatch, "trailing bytes after FQEM payload in " + path.string());

    Matrix m(rows, dim);
    for (std::size_t i = 0; i < payload.size(); ++i) m.data[i] = payload[i];

    std::vector<std::string> labels;
    std::vector<int> categories;
    const auto mpath = manifest_path(path);
    if (std::filesystem::exists(mpath)) {
        std::ifstream js(mpath);
        nlohmann::json j;
        try {
            js >> j;
            labels = j.value("labels", std::vector<std::string>{});
            categories = j.value("categories", std::vector<int>{});
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Format, "malformed manifest " + mpath.string() + ": " + e.what());
        }
    }
    try {
        return EmbeddingMatrix(std::move(m), std::move(labels), std::move(categories));
    } catch (const Error& e) {
        fail(ErrorKind::Format, std::string(e.what()) + " in " + path.string());
    }
}

}  // namespace fqem
}  // namespace fairqueue
