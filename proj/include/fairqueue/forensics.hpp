#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/numerics.hpp"

namespace fairqueue {

struct StepWindow {
    std::size_t begin = 0;  // inclusive
    std::size_t end = 0;    // exclusive

    bool empty() const { return end <= begin; }
    bool contains(std::size_t t) const { return t >= begin && t < end; }
};

struct AccumulatedMap {
    std::string token_label;
    StepWindow window;
    Grid2D grid;
    std::uint64_t sample_id = 0;
};

struct AccumulateOptions {
    bool use_effective = false;  // raw maps unless asked otherwise
    bool allow_empty = false;    // empty window yields a zero map instead of an error
};

/// Sums a token's maps over every record step in the window and every layer,
/// after bicubic upscaling to the image size. Upscaling is linear, so each
/// layer is summed at native resolution first and upscaled once.
inline AccumulatedMap accumulate(std::span<const AttentionRecord> records, std::size_t token, StepWindow window,
                                 std::size_t image_h, std::size_t image_w, const AccumulateOptions& options = {}) {
    AccumulatedMap out{"", window, Grid2D(image_h, image_w), 0};
    if (window.empty()) {
        if (options.allow_empty) return out;
        fail(ErrorKind::InvalidWindow, "empty step window [" + std::to_string(window.begin) + ", " +
                                           std::to_string(window.end) + ")");
    }
    std::vector<bool> seen(window.end - window.begin, false);
    std::vector<Grid2D> per_layer;
    for (const auto& rec : records) {
        if (!window.contains(rec.step)) continue;
        if (token >= rec.token_count) fail(ErrorKind::InvalidToken, "token " + std::to_string(token) + " out of range");
        seen[rec.step - window.begin] = true;
        if (per_layer.size() < rec.layers.size()) per_layer.resize(rec.layers.size());
        for (std::size_t li = 0; li < rec.layers.size(); ++li) {
            const auto& layer = rec.layers[li];
            auto& acc = per_layer[li];
            if (acc.size() == 0) acc = Grid2D(layer.height, layer.width);
            if (acc.height != layer.height || acc.width != layer.width)
                fail(ErrorKind::InvalidInput, "layer resolution changed between steps");
            const auto m = options.use_effective ? layer.effective_map(token) : layer.raw_map(token);
            for (std::size_t i = 0; i < m.size(); ++i) acc.values[i] += m[i];
        }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        fail(ErrorKind::InvalidWindow, "window reaches steps that were not recorded");
    for (const auto& acc : per_layer) out.grid += bicubic_upscale(acc, image_h, image_w);
    return out;
}

/// Spatial mean of a map. Values are summed in sorted order so the result
/// does not depend on cell order at all.
inline double amplitude(const Grid2D& map) {
    if (map.size() == 0) fail(ErrorKind::InvalidInput, "empty map");
    std::vector<double> v = map.values;
    std::sort(v.begin(), v.end());
    double s = 0.0, comp = 0.0;
    for (double x : v) {
        const double y = x - comp;
        const double t = s + y;
        comp = (t - s) - y;
        s = t;
    }
    return s / static_cast<double>(map.size());
}

/// Intensity-weighted second moment of the normalised map about its centroid,
/// over 0-based integer cell coordinates (x = column, y = row).
inline double central_moment(const Grid2D& map) {
    if (map.size() == 0) fail(ErrorKind::InvalidInput, "empty map");
    std::vector<double> row_mass(map.height, 0.0), col_mass(map.width, 0.0);
    double total = 0.0;
    for (std::size_t y = 0; y < map.height; ++y)
        for (std::size_t x = 0; x < map.width; ++x) {
            const double v = map.at(y, x);
            row_mass[y] += v;
            col_mass[x] += v;
            total += v;
        }
    if (!(total > 0.0)) fail(ErrorKind::DegenerateMap, "map has no positive mass");
    auto spread = [total](const std::vector<double>& marginal) {
        double mean = 0.0;
        for (std::size_t i = 0; i < marginal.size(); ++i) mean += static_cast<double>(i) * marginal[i];
        mean /= total;
        double s = 0.0;
        for (std::size_t i = 0; i < marginal.size(); ++i) {
            const double d = static_cast<double>(i) - mean;
            s += d * d * marginal[i];
        }
        return s / total;
    };
    return spread(col_mass) + spread(row_mass);
}

struct MetricHistogram {
    std::string metric;
    std::vector<double> edges;
    std::vector<std::size_t> counts;
    std::size_t n = 0;

    /// Adds another histogram over the same edges.
    MetricHistogram& merge(const MetricHistogram& other) {
        if (other.edges != edges) fail(ErrorKind::InvalidInput, "cannot merge histograms with different edges");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
        n += other.n;
        return *this;
    }

    nlohmann::json to_json() const { return {{"metric", metric}, {"edges", edges}, {"counts", counts}, {"n", n}}; }
};

/// Counts over [e_i, e_{i+1}), last bin closed. Values beyond the outer
/// edges land in the outer bins so the counts always sum to n.
inline MetricHistogram metric_histogram(std::string metric, std::span<const double> values, std::vector<double> edges) {
    if (edges.size() < 2) fail(ErrorKind::InvalidInput, "histogram needs at least one bin");
    if (!std::is_sorted(edges.begin(), edges.end()) || std::adjacent_find(edges.begin(), edges.end()) != edges.end())
        fail(ErrorKind::InvalidInput, "histogram edges must be strictly increasing");
    MetricHistogram h{std::move(metric), std::move(edges), {}, values.size()};
    h.counts.assign(h.edges.size() - 1, 0);
    for (double v : values) {
        if (!std::isfinite(v)) fail(ErrorKind::InvalidInput, "histogram values must be finite");
        const auto it = std::upper_bound(h.edges.begin(), h.edges.end(), v);
        auto bin = static_cast<std::ptrdiff_t>(it - h.edges.begin()) - 1;
        bin = std::clamp<std::ptrdiff_t>(bin, 0, static_cast<std::ptrdiff_t>(h.counts.size()) - 1);
        ++h.counts[static_cast<std::size_t>(bin)];
    }
    return h;
}

/// Equal-width bins spanning [min, max] of the values.
inline MetricHistogram metric_histogram(std::string metric, std::span<const double> values, std::size_t bins) {
    if (bins < 1) fail(ErrorKind::InvalidInput, "histogram needs at least one bin");
    double lo = 0.0, hi = 1.0;
    if (!values.empty()) {
        for (double v : values)
            if (!std::isfinite(v)) fail(ErrorKind::InvalidInput, "histogram values must be finite");
        const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
        lo = *mn;
        hi = *mx;
        if (hi == lo) lo -= 0.5, hi += 0.5;
    }
    std::vector<double> edges(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i)
        edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
    edges.back() = hi;
    return metric_histogram(std::move(metric), values, std::move(edges));
}

struct LabelledMap {
    std::string label;
    Grid2D grid;
};

/// Accumulated maps of one sample: attribute tokens and ordinary tokens.
struct SampleMaps {
    std::uint64_t sample_id = 0;
    std::vector<LabelledMap> tsa;
    std::vector<LabelledMap> non_tsa;
};

struct TokenLabel {
    std::size_t index = 0;
    std::string label;
};

inline SampleMaps accumulate_sample(std::uint64_t sample_id, std::span<const AttentionRecord> records,
                                    const std::vector<TokenLabel>& tsa_tokens,
                                    const std::vector<TokenLabel>& non_tsa_tokens, StepWindow window,
                                    std::size_t image_h, std::size_t image_w, const AccumulateOptions& options = {}) {
    SampleMaps s{sample_id, {}, {}};
    for (const auto& t : tsa_tokens)
        s.tsa.push_back({t.label, accumulate(records, t.index, window, image_h, image_w, options).grid});
    for (const auto& t : non_tsa_tokens)
        s.non_tsa.push_back({t.label, accumulate(records, t.index, window, image_h, image_w, options).grid});
    return s;
}

struct AbnormalityRow {
    std::uint64_t sample_id = 0;
    std::string token_label;
    std::string stage;
    std::string metric_name;
    double value = 0.0;
};

struct AbnormalityReport {
    std::vector<AbnormalityRow> rows;
    MetricHistogram central_moment_hist;
    MetricHistogram amplitude_hist;

    std::vector<double> values(const std::string& metric) const {
        std::vector<double> v;
        for (const auto& r : rows)
            if (r.metric_name == metric) v.push_back(r.value);
        return v;
    }

    void write_csv(std::ostream& out) const {
        out << "sample_id,token_label,stage,metric_name,value\n";
        out.precision(17);
        for (const auto& r : rows)
            out << r.sample_id << ',' << r.token_label << ',' << r.stage << ',' << r.metric_name << ',' << r.value
                << '\n';
    }
};

/// Central moment per attribute token and amplitude per ordinary token, for
/// every sample, plus a histogram of each metric.
inline AbnormalityReport abnormality_report(const std::vector<SampleMaps>& samples, const std::string& stage,
                                            std::size_t bins = 20) {
    AbnormalityReport rep;
    for (const auto& s : samples) {
        for (const auto& m : s.tsa)
            rep.rows.push_back({s.sample_id, m.label, stage, "central_moment", central_moment(m.grid)});
        for (const auto& m : s.non_tsa)
            rep.rows.push_back({s.sample_id, m.label, stage, "amplitude", amplitude(m.grid)});
    }
    const auto mu = rep.values("central_moment");
    const auto amp = rep.values("amplitude");
    rep.central_moment_hist = metric_histogram("central_moment", mu, bins);
    rep.amplitude_hist = metric_histogram("amplitude", amp, bins);
    return rep;
}

}  // namespace fairqueue
