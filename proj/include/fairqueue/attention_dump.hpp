#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/error.hpp"

namespace fairqueue {

/// Raw attention of a whole trajectory.
///
/// Layout, all little-endian:
///   "FQAT" | version u32 | steps u32 | layers u32 | tokens u32 |
///   (h_map u32, w_map u32) per layer |
///   f32 payload ordered [step][layer][token][row][col]
struct AttentionDump {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t steps = 0;
    std::uint32_t tokens = 0;
    std::vector<LayerShape> layers;
    std::vector<float> payload;

    std::size_t expected_payload() const {
        std::size_t per_step = 0;
        for (const auto& l : layers) per_step += tokens * l.height * l.width;
        return per_step * steps;
    }

    friend bool operator==(const AttentionDump&, const AttentionDump&) = default;
};

/// Packs the raw maps of consecutive records starting at step 0. The header
/// token count is the largest over all steps; steps whose prompt is shorter
/// (the plain stage of a queued schedule) are zero-filled past their last token.
inline AttentionDump to_dump(const std::vector<AttentionRecord>& records, const std::vector<LayerShape>& shapes = {},
                             std::size_t tokens = 0) {
    AttentionDump d;
    d.steps = static_cast<std::uint32_t>(records.size());
    if (records.empty()) {
        d.layers = shapes;
        d.tokens = static_cast<std::uint32_t>(tokens);
        return d;
    }
    for (const auto& rec : records) d.tokens = std::max(d.tokens, static_cast<std::uint32_t>(rec.token_count));
    for (const auto& l : records.front().layers) d.layers.push_back({l.height, l.width});
    d.payload.reserve(d.expected_payload());
    for (std::size_t t = 0; t < records.size(); ++t) {
        const auto& rec = records[t];
        if (rec.step != t) fail(ErrorKind::InvalidInput, "records must be consecutive from step 0");
        if (rec.layers.size() != d.layers.size()) fail(ErrorKind::InvalidInput, "records disagree on layer count");
        for (std::size_t li = 0; li < rec.layers.size(); ++li) {
            const auto& l = rec.layers[li];
            if (l.height != d.layers[li].height || l.width != d.layers[li].width)
                fail(ErrorKind::InvalidInput, "records disagree on layer shape");
            d.payload.insert(d.payload.end(), l.raw.begin(), l.raw.end());
            d.payload.resize(d.payload.size() + (d.tokens - rec.token_count) * l.height * l.width, 0.0f);
        }
    }
    return d;
}

/// Unpacks into records carrying raw maps only.
inline std::vector<AttentionRecord> to_records(const AttentionDump& d) {
    if (d.payload.size() != d.expected_payload())
        fail(ErrorKind::LengthMismatch, "payload holds " + std::to_string(d.payload.size()) + " floats, header implies " +
                                            std::to_string(d.expected_payload()));
    std::vector<AttentionRecord> out;
    auto it = d.payload.begin();
    for (std::size_t t = 0; t < d.steps; ++t) {
        AttentionRecord rec{t, d.tokens, {}, {}, 1.0};
        for (std::size_t li = 0; li < d.layers.size(); ++li) {
            const auto [h, w] = d.layers[li];
            const auto n = static_cast<std::ptrdiff_t>(d.tokens * h * w);
            rec.layers.push_back(LayerMaps{li, h, w, d.tokens, std::vector<float>(it, it + n), {}});
            it += n;
        }
        out.push_back(std::move(rec));
    }
    return out;
}

namespace detail {

inline void append_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t take_u32(const std::string& in, std::size_t& at, const std::string& where) {
    if (at + 4 > in.size()) fail(ErrorKind::Format, "truncated FQAT header" + where);
    std::uint32_t v = 0;
    std::memcpy(&v, in.data() + at, 4);
    at += 4;
    return v;
}

}  // namespace detail

inline std::string serialize(const AttentionDump& d) {
    if (d.payload.size() != d.expected_payload()) fail(ErrorKind::LengthMismatch, "payload does not match header");
    std::string out("FQAT");
    detail::append_u32(out, AttentionDump::kVersion);
    detail::append_u32(out, d.steps);
    detail::append_u32(out, static_cast<std::uint32_t>(d.layers.size()));
    detail::append_u32(out, d.tokens);
    for (const auto& l : d.layers) {
        detail::append_u32(out, static_cast<std::uint32_t>(l.height));
        detail::append_u32(out, static_cast<std::uint32_t>(l.width));
    }
    out.append(reinterpret_cast<const char*>(d.payload.data()), d.payload.size() * sizeof(float));
    return out;
}

inline AttentionDump deserialize(const std::string& bytes, const std::string& where = "") {
    const std::string suffix = where.empty() ? "" : " in " + where;
    if (bytes.size() < 4 || bytes.compare(0, 4, "FQAT") != 0) fail(ErrorKind::Format, "bad FQAT magic" + suffix);
    std::size_t at = 4;
    const std::uint32_t version = detail::take_u32(bytes, at, suffix);
    if (version != AttentionDump::kVersion)
        fail(ErrorKind::UnsupportedVersion, "FQAT version " + std::to_string(version) + suffix);
    AttentionDump d;
    d.steps = detail::take_u32(bytes, at, suffix);
    const std::uint32_t layers = detail::take_u32(bytes, at, suffix);
    d.tokens = detail::take_u32(bytes, at, suffix);
    for (std::uint32_t i = 0; i < layers; ++i) {
        const std::uint32_t h = detail::take_u32(bytes, at, suffix);
        const std::uint32_t w = detail::take_u32(bytes, at, suffix);
        d.layers.push_back({h, w});
    }
    const std::size_t expected = d.expected_payload() * sizeof(float);
    if (bytes.size() - at != expected)
        fail(ErrorKind::LengthMismatch, "payload has " + std::to_string(bytes.size() - at) + " bytes, expected " +
                                            std::to_string(expected) + suffix);
    d.payload.resize(d.expected_payload());
    std::memcpy(d.payload.data(), bytes.data() + at, expected);
    return d;
}

inline void write_dump(const std::filesystem::path& path, const AttentionDump& d) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path.string());
    const std::string bytes = serialize(d);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

inline AttentionDump read_dump(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open: " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path.string());
}

/// One step in the wire format used by the backend contract.
inline std::string serialize_record(const AttentionRecord& rec) {
    AttentionRecord shifted = rec;
    shifted.step = 0;
    return serialize(to_dump({shifted}));
}

}  // namespace fairqueue
