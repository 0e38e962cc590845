#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairqueue/attention_dump.hpp"
#include "fairqueue/config.hpp"
#include "fairqueue/denoiser.hpp"
#include "fairqueue/embedding.hpp"
#include "fairqueue/fairness.hpp"
#include "fairqueue/forensics.hpp"
#include "fairqueue/parallel.hpp"
#include "fairqueue/prompt_learner.hpp"
#include "fairqueue/schedule.hpp"
#include "fairqueue/toy_world.hpp"
#include "fairqueue/trajectory.hpp"

namespace fairqueue {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// sample generation

struct Sample {
    std::uint64_t seed = 0;
    std::size_t category = 0;
    LatentState initial;
    LatentState final_state;
    Image image;
    std::vector<AttentionRecord> records;

    /// Planted-channel mean signed by the intended category: larger means the
    /// attribute is expressed more strongly.
    double expression(const World& world) const {
        return category_sign(category, world.categories()) * world.denoiser.planted_mean(final_state);
    }
};

/// One trajectory per seed; the i-th seed gets category spec.category_for(i).
inline std::vector<Sample> generate_samples(const World& world, const ScheduleSpec& spec,
                                            const std::vector<std::uint64_t>& seeds, bool keep_records = false) {
    std::vector<PromptSchedule> per_category;
    for (std::size_t k = 0; k < world.categories(); ++k) per_category.push_back(spec.build(world, k));
    if (spec.category && *spec.category >= world.categories())
        fail(ErrorKind::Config, "schedule.prompt_refs.category: no such category");
    std::vector<Sample> out(seeds.size());
    parallel_for(seeds.size(), [&](std::size_t i) {
        const std::size_t k = spec.category_for(i, world.categories());
        Trajectory tr = run_trajectory(world.denoiser, seeds[i], per_category[k], {0, keep_records});
        out[i] = Sample{seeds[i], k, std::move(tr.initial), std::move(tr.final_state), std::move(tr.image),
                        std::move(tr.records)};
    });
    return out;
}

/// Images of the plain base prompt over the calibration seeds.
inline std::vector<Image> calibration_images(const World& world) {
    ScheduleSpec spec;
    spec.kind = ScheduleKind::Constant;
    spec.prompt = "base";
    spec.c = 1.0;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < world.config.calibration_samples; ++i)
        seeds.push_back(world.config.calibration_seed_base + i);
    std::vector<Image> images;
    for (auto& s : generate_samples(world, spec, seeds)) images.push_back(std::move(s.image));
    return images;
}

inline ToyClassifier calibrate_classifier(const std::vector<Image>& images, std::size_t k) {
    std::vector<double> stats;
    for (const auto& img : images) stats.push_back(ToyClassifier::statistic(img));
    return ToyClassifier::calibrate(std::move(stats), k);
}

// ---------------------------------------------------------------------------
// file helpers

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot open for writing: " + p.string());
    out.precision(17);
    return out;
}

inline void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

/// Two-column CSV with a header: id column then a value column.
inline std::vector<std::pair<std::string, std::string>> read_two_column_csv(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail(ErrorKind::Io, "cannot open: " + p.string());
    std::vector<std::pair<std::string, std::string>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 || line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
            fail(ErrorKind::Format, p.string() + ":" + std::to_string(lineno) + ": expected two columns");
        rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
    }
    return rows;
}

inline std::vector<std::pair<std::string, double>> read_score_csv(const fs::path& p) {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [id, v] : read_two_column_csv(p)) {
        try {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
            out.emplace_back(id, x);
        } catch (const std::exception&) {
            fail(ErrorKind::Format, p.string() + ": score '" + v + "' for " + id + " is not a finite number");
        }
    }
    return out;
}

inline EmbeddingMatrix images_to_matrix(const std::vector<Sample>& samples) {
    const std::size_t n = samples.front().image.values.size();
    Matrix m(samples.size(), n);
    std::vector<std::string> labels;
    std::vector<int> cats;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        std::copy(samples[i].image.values.begin(), samples[i].image.values.end(), m.row(i).begin());
        labels.push_back(std::to_string(samples[i].seed));
        cats.push_back(static_cast<int>(samples[i].category));
    }
    return EmbeddingMatrix(std::move(m), std::move(labels), std::move(cats));
}

inline std::vector<Image> matrix_to_images(const EmbeddingMatrix& m, std::size_t h, std::size_t w) {
    if (m.dim() != 3 * h * w)
        fail(ErrorKind::Config, "image rows hold " + std::to_string(m.dim()) + " values, expected 3 x " +
                                    std::to_string(h) + " x " + std::to_string(w));
    std::vector<Image> out;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const auto r = m.row(i);
        out.push_back(Image{3, h, w, std::vector<double>(r.begin(), r.end())});
    }
    return out;
}

inline std::string sample_id(const EmbeddingMatrix& m, std::size_t i) {
    return m.labels.empty() ? std::to_string(i) : m.labels[i];
}

// ---------------------------------------------------------------------------
// manifests

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

/// Reproducibility envelope: the resolved inputs plus where outputs went.
struct RunManifest {
    std::string command;
    json config;  // world, schedule and any command parameters
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> outputs;
    std::string created_at = utc_now();

    std::string hash() const { return config_hash({{"command", command}, {"config", config}, {"seeds", seeds}}); }

    json to_json() const {
        json j = config;
        j["seeds"] = seeds;
        j["run_id"] = command + "-" + hash();
        j["command"] = command;
        j["config_hash"] = hash();
        j["outputs"] = outputs;
        j["created_at"] = created_at;
        j["finished_at"] = utc_now();
        return j;
    }
};

/// Keys a manifest adds on top of a run config; accepted and ignored on input.
inline const std::set<std::string>& manifest_keys() {
    static const std::set<std::string> keys{"run_id", "command", "config_hash", "outputs", "created_at", "finished_at"};
    return keys;
}

// ---------------------------------------------------------------------------
// learn-tokens

struct LearnTokensJob {
    EmbeddingMatrix base;
    ReferenceSet refs;
    std::unique_ptr<PromptEncoder> encoder;
    LearnConfig learn;
    std::vector<std::string> hard_prompts;
    std::uint64_t vocab_seed = 0;
};

/// Realizable reference features: push chosen tokens through the encoder and
/// scatter symmetric noise pairs around each category's encoding, so every
/// category mean lands exactly on it (plus a shared offset).
struct RealizableReferences {
    ReferenceSet refs;
    std::vector<EmbeddingMatrix> target_tokens;
};

inline RealizableReferences realizable_references(const EmbeddingMatrix& base, const PromptEncoder& encoder,
                                                  std::size_t categories, std::size_t per_category, std::size_t q,
                                                  std::uint64_t seed, double noise = 0.3) {
    if (per_category < 2 || per_category % 2 != 0)
        fail(ErrorKind::InvalidInput, "per-category count must be even and at least 2");
    SeededRng rng(seed, 0x2EF5);
    const std::size_t fd = encoder.output_dim();
    std::vector<double> offset(fd);
    for (double& v : offset) v = rng.normal();
    RealizableReferences out;
    for (std::size_t k = 0; k < categories; ++k) {
        Matrix s(q, base.dim());
        for (double& v : s.data) v = rng.normal();
        EmbeddingMatrix tokens(std::move(s));
        const auto e = encoder.encode(vstack({&base, &tokens}));
        Matrix f(per_category, fd);
        for (std::size_t n = 0; n < per_category / 2; ++n)
            for (std::size_t c = 0; c < fd; ++c) {
                const double z = noise * rng.normal();
                f(2 * n, c) = e[c] + offset[c] + z;
                f(2 * n + 1, c) = e[c] + offset[c] - z;
            }
        out.refs.categories.emplace_back(std::move(f));
        out.target_tokens.push_back(std::move(tokens));
    }
    return out;
}

inline LearnTokensJob parse_learn_job(const json& j, const fs::path& config_dir) {
    using config_detail::get;
    const std::string path = "learn";
    config_detail::check_keys(j, {"base_prompt", "vocab_seed", "embed_dim", "refs", "encoder", "iters", "lr", "q", "seed",
                                  "init_std", "hard_prompts", "optimizer"},
                              path);
    LearnTokensJob job;
    job.vocab_seed = get<std::uint64_t>(j, "vocab_seed", 0, path);
    const auto embed_dim = get<std::size_t>(j, "embed_dim", 16, path);
    job.base = ToyVocabulary(embed_dim, job.vocab_seed).encode(get<std::string>(j, "base_prompt", "a headshot of a person", path));
    job.learn.iters = get(j, "iters", job.learn.iters, path);
    job.learn.lr = get(j, "lr", job.learn.lr, path);
    job.learn.q = get(j, "q", job.learn.q, path);
    job.learn.seed = get(j, "seed", job.learn.seed, path);
    job.learn.init_std = get(j, "init_std", job.learn.init_std, path);
    if (const auto opt = get<std::string>(j, "optimizer", "adam", path); opt == "gd")
        job.learn.optimizer = Optimizer::GradientDescent;
    else if (opt != "adam")
        fail(ErrorKind::Config, path + ".optimizer: expected adam or gd, got '" + opt + "'");
    job.hard_prompts = get(j, "hard_prompts", std::vector<std::string>{}, path);

    std::uint64_t encoder_seed = 0;
    std::optional<std::size_t> feature_dim;
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        config_detail::check_keys(e, {"seed", "feature_dim"}, path + ".encoder");
        encoder_seed = get(e, "seed", encoder_seed, path + ".encoder");
        if (e.contains("feature_dim")) feature_dim = get<std::size_t>(e, "feature_dim", 0, path + ".encoder");
    }

    if (!j.contains("refs")) fail(ErrorKind::Config, path + ".refs: required");
    const auto& refs = j.at("refs");
    if (refs.is_array()) {
        for (const auto& item : refs) {
            if (!item.is_string()) fail(ErrorKind::Config, path + ".refs: expected file paths");
            fs::path p = item.get<std::string>();
            if (p.is_relative()) p = config_dir / p;
            job.refs.categories.push_back(fqem::read(p));
        }
    } else if (refs.is_string()) {
        fs::path p = refs.get<std::string>();
        if (p.is_relative()) p = config_dir / p;
        const auto all = fqem::read(p);
        if (all.categories.size() != all.rows())
            fail(ErrorKind::Format, p.string() + ": manifest must assign a category to every row");
        const int kmax = *std::max_element(all.categories.begin(), all.categories.end());
        std::vector<std::vector<std::size_t>> rows(static_cast<std::size_t>(kmax) + 1);
        for (std::size_t i = 0; i < all.rows(); ++i) {
            if (all.categories[i] < 0) fail(ErrorKind::Format, p.string() + ": negative category");
            rows[static_cast<std::size_t>(all.categories[i])].push_back(i);
        }
        for (const auto& idx : rows) {
            if (idx.empty()) fail(ErrorKind::EmptyCategory, p.string() + ": a category has no rows");
            Matrix m(idx.size(), all.dim());
            for (std::size_t r = 0; r < idx.size(); ++r)
                std::copy(all.row(idx[r]).begin(), all.row(idx[r]).end(), m.row(r).begin());
            job.refs.categories.emplace_back(std::move(m));
        }
    } else {
        const std::string p = path + ".refs";
        config_detail::check_keys(refs, {"synthetic"}, p);
        const auto& syn = refs.at("synthetic");
        config_detail::check_keys(syn, {"categories", "per_category", "seed", "feature_dim", "noise"}, p + ".synthetic");
        const auto fd = get<std::size_t>(syn, "feature_dim", feature_dim.value_or(8), p + ".synthetic");
        job.encoder = std::make_unique<MeanPoolProjectionEncoder>(embed_dim, fd, encoder_seed);
        auto rr = realizable_references(job.base, *job.encoder, get<std::size_t>(syn, "categories", 2, p + ".synthetic"),
                                        get<std::size_t>(syn, "per_category", 200, p + ".synthetic"), job.learn.q,
                                        get<std::uint64_t>(syn, "seed", 0, p + ".synthetic"),
                                        get<double>(syn, "noise", 0.3, p + ".synthetic"));
        job.refs = std::move(rr.refs);
    }
    try {
        job.refs.validate();
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::EmptyCategory) throw;
        fail(ErrorKind::Config, path + ".refs: " + e.what());
    }
    if (!job.encoder) {
        const std::size_t fd = job.refs.categories.front().dim();
        if (feature_dim && *feature_dim != fd)
            fail(ErrorKind::Config, path + ".encoder.feature_dim: references have dim " + std::to_string(fd));
        job.encoder = std::make_unique<MeanPoolProjectionEncoder>(embed_dim, fd, encoder_seed);
    }
    if (!job.hard_prompts.empty() && job.hard_prompts.size() != job.refs.category_count())
        fail(ErrorKind::Config, path + ".hard_prompts: need one per reference category");
    return job;
}

struct LearnTokensOutcome {
    LearnResult result;
    std::vector<DirectionRow> directions;
};

inline LearnTokensOutcome cmd_learn_tokens(const json& config, const fs::path& config_dir, const fs::path& out_dir) {
    const auto job = parse_learn_job(config, config_dir);
    ensure_dir(out_dir);
    LearnTokensOutcome out;
    out.result = learn_tokens(job.base, job.refs, *job.encoder, job.learn);
    RunManifest manifest{"learn-tokens", {{"learn", config}}, {job.learn.seed}, {}};
    for (const auto& t : out.result.tokens) {
        const auto name = "tokens_" + std::to_string(t.category) + ".fqem";
        fqem::write(out_dir / name, t.tokens);
        manifest.outputs.push_back(name);
    }
    {
        auto csv = open_out(out_dir / "loss_trace.csv");
        csv << "iter,mean_l_dir\n";
        for (std::size_t i = 0; i < out.result.loss_trace.size(); ++i) csv << i << ',' << out.result.loss_trace[i] << '\n';
        manifest.outputs.push_back("loss_trace.csv");
    }
    if (!job.hard_prompts.empty()) {
        const ToyVocabulary vocab(job.base.dim(), job.vocab_seed);
        const auto hard = hard_prompt_group(vocab, "hard", job.hard_prompts);
        out.directions = direction_report(job.refs, encode_categories(job.base, out.result.tokens, *job.encoder),
                                          encode_categories(job.base, hard.categories, *job.encoder));
        auto csv = open_out(out_dir / "direction_report.csv");
        csv << "category_i,category_j,l_dir_learned,l_dir_hard\n";
        for (const auto& r : out.directions) csv << r.i << ',' << r.j << ',' << r.learned_loss << ',' << r.hard_loss << '\n';
        manifest.outputs.push_back("direction_report.csv");
    }
    write_json(out_dir / "manifest.json", manifest.to_json());
    return out;
}

// ---------------------------------------------------------------------------
// generate

struct RunConfig {
    WorldConfig world;
    ScheduleSpec schedule;
    std::vector<std::uint64_t> seeds;
    bool has_seeds = false;
};

/// A run config or an earlier manifest: {"world", "schedule", "seeds"}.
inline RunConfig parse_run_config(const json& j, const std::set<std::string>& extra = {}) {
    std::set<std::string> allowed{"world", "schedule", "seeds"};
    allowed.insert(manifest_keys().begin(), manifest_keys().end());
    allowed.insert(extra.begin(), extra.end());
    config_detail::check_keys(j, allowed, "config");
    RunConfig rc;
    if (j.contains("world")) rc.world = parse_world(j.at("world"));
    if (j.contains("schedule")) rc.schedule = parse_schedule(j.at("schedule"));
    if (j.contains("seeds")) {
        rc.seeds = config_detail::get<std::vector<std::uint64_t>>(j, "seeds", {}, "config");
        rc.has_seeds = true;
    }
    return rc;
}

struct GenerateOutcome {
    std::vector<Sample> samples;
    json manifest;
};

inline GenerateOutcome cmd_generate(const RunConfig& rc, const fs::path& config_dir, const fs::path& out_dir,
                                    bool dump_attention) {
    if (rc.seeds.empty()) fail(ErrorKind::Config, "no seeds given");
    const World world(rc.world, config_dir);
    ensure_dir(out_dir);
    GenerateOutcome out;
    out.samples = generate_samples(world, rc.schedule, rc.seeds, dump_attention);

    ScheduleSpec resolved = rc.schedule;
    resolved.n_switch = rc.schedule.resolved_switch(world.steps());
    RunManifest manifest{"generate", {{"world", to_json(rc.world)}, {"schedule", to_json(resolved)}}, rc.seeds, {}};
    fqem::write(out_dir / "images.fqem", images_to_matrix(out.samples));
    manifest.outputs.push_back("images.fqem");
    {
        auto csv = open_out(out_dir / "samples.csv");
        csv << "sample_id,category,planted_mean,expression,channel0_mean\n";
        for (const auto& s : out.samples)
            csv << s.seed << ',' << s.category << ',' << world.denoiser.planted_mean(s.final_state) << ','
                << s.expression(world) << ',' << s.image.channel_mean(0) << '\n';
        manifest.outputs.push_back("samples.csv");
    }
    if (dump_attention) {
        ensure_dir(out_dir / "attention");
        for (const auto& s : out.samples) {
            const auto name = "attention/" + std::to_string(s.seed) + ".fqat";
            write_dump(out_dir / name, to_dump(s.records));
            manifest.outputs.push_back(name);
        }
    }
    out.manifest = manifest.to_json();
    write_json(out_dir / "manifest.json", out.manifest);
    return out;
}

// ---------------------------------------------------------------------------
// switch

inline std::vector<TokenLabel> base_token_labels(const ComposedPrompt& p) {
    std::vector<TokenLabel> out;
    for (std::size_t i = 0; i < p.base_rows; ++i)
        out.push_back({i, std::to_string(i) + ":" + (p.rows.labels.empty() ? std::string("tok") : p.rows.labels[i])});
    return out;
}

inline std::vector<TokenLabel> tsa_token_labels(const ComposedPrompt& p) {
    std::vector<TokenLabel> out;
    for (std::size_t i : p.tsa_tokens())
        out.push_back({i, std::to_string(i) + ":" + (p.rows.labels.empty() ? std::string("tsa") : p.rows.labels[i])});
    return out;
}

struct StageMaps {
    std::string stage;
    StepWindow window;
    std::vector<SampleMaps> samples;
};

struct SwitchOutcome {
    std::vector<Sample> samples;
    std::vector<StageMaps> stages;  // only non-empty windows
    std::vector<AbnormalityReport> reports;
};

inline SwitchOutcome cmd_switch(const WorldConfig& wc, const fs::path& config_dir, const std::string& mode,
                                std::size_t n_switch, const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                std::size_t bins = 20) {
    if (seeds.empty()) fail(ErrorKind::Config, "no seeds given");
    const World world(wc, config_dir);
    ScheduleSpec spec;
    spec.kind = ScheduleKind::SwitchAt;
    if (mode == "i2h") {
        spec.stage1_prompt = "learned";
        spec.stage2_prompt = "hard";
    } else if (mode == "h2i") {
        spec.stage1_prompt = "hard";
        spec.stage2_prompt = "learned";
    } else {
        fail(ErrorKind::Config, "--mode: expected i2h or h2i, got '" + mode + "'");
    }
    spec.n_switch = n_switch;
    const std::size_t l = world.steps();
    if (n_switch > l) fail(ErrorKind::InvalidSchedule, "n_switch exceeds step count");

    SwitchOutcome out;
    out.samples = generate_samples(world, spec, seeds, true);
    const auto& dc = world.config.denoiser;

    const StepWindow windows[2] = {{0, n_switch}, {n_switch, l}};
    for (int st = 0; st < 2; ++st) {
        if (windows[st].empty()) continue;
        StageMaps sm{"stage" + std::to_string(st + 1), windows[st], std::vector<SampleMaps>(out.samples.size())};
        parallel_for(out.samples.size(), [&](std::size_t i) {
            const auto& s = out.samples[i];
            const auto sched = spec.build(world, s.category);
            const ComposedPrompt& p = st == 0 ? sched.stage1 : *sched.stage2;
            sm.samples[i] = accumulate_sample(s.seed, s.records, tsa_token_labels(p), base_token_labels(p),
                                              windows[st], dc.image_h, dc.image_w);
        });
        out.reports.push_back(abnormality_report(sm.samples, sm.stage, bins));
        out.stages.push_back(std::move(sm));
    }

    ensure_dir(out_dir);
    RunManifest manifest{"switch",
                         {{"world", to_json(wc)}, {"mode", mode}, {"n_switch", n_switch}, {"bins", bins}},
                         seeds,
                         {}};
    json hist = json::object();
    for (std::size_t i = 0; i < out.stages.size(); ++i) {
        const auto& sm = out.stages[i];
        std::size_t rows = 0;
        for (const auto& s : sm.samples) rows += s.tsa.size() + s.non_tsa.size();
        Matrix m(rows, dc.image_h * dc.image_w);
        std::vector<std::string> labels;
        std::size_t r = 0;
        for (const auto& s : sm.samples)
            for (const auto* group : {&s.tsa, &s.non_tsa})
                for (const auto& lm : *group) {
                    std::copy(lm.grid.values.begin(), lm.grid.values.end(), m.row(r++).begin());
                    labels.push_back(std::to_string(s.sample_id) + "|" + sm.stage + "|" + lm.label);
                }
        const auto name = "maps_" + sm.stage + ".fqem";
        fqem::write(out_dir / name, EmbeddingMatrix(std::move(m), std::move(labels)));
        manifest.outputs.push_back(name);
        hist[sm.stage] = {out.reports[i].central_moment_hist.to_json(), out.reports[i].amplitude_hist.to_json()};
    }
    {
        auto csv = open_out(out_dir / "abnormality.csv");
        csv << "sample_id,token_label,stage,metric_name,value\n";
        for (const auto& rep : out.reports)
            for (const auto& row : rep.rows)
                csv << row.sample_id << ',' << row.token_label << ',' << row.stage << ',' << row.metric_name << ','
                    << row.value << '\n';
        manifest.outputs.push_back("abnormality.csv");
    }
    write_json(out_dir / "histograms.json", hist);
    manifest.outputs.push_back("histograms.json");
    write_json(out_dir / "manifest.json", manifest.to_json());
    return out;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationRow {
    AblationSetting setting;
    double fd = 0.0;
    double ta_proxy = 0.0;
    double expression_mean = 0.0;
    std::vector<double> expression;  // per seed
};

/// Base-prompt direction in the toy feature space: normalised mean feature of
/// the calibration images.
inline std::vector<double> base_feature(const FeatureProvider& provider, const std::vector<Image>& base_images) {
    std::vector<double> mean(provider.dim(), 0.0);
    for (const auto& img : base_images) {
        const auto f = provider.features(img);
        for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
    }
    const double n = norm(mean);
    if (!(n > 0.0)) fail(ErrorKind::DegenerateFeature, "base feature is zero");
    for (double& v : mean) v /= n;
    return mean;
}

/// Drops repeated (c, fraction) grid entries, keeping first-seen order.
inline std::vector<AblationSetting> dedup_settings(const std::vector<AblationSetting>& in) {
    std::vector<AblationSetting> out;
    std::set<std::pair<double, double>> seen;
    for (const auto& s : in)
        if (seen.insert({s.c, s.fraction}).second) out.push_back(s);
    return out;
}

inline std::vector<AblationRow> run_ablation(const World& world, const std::vector<double>& c_values,
                                             const std::vector<double>& fractions,
                                             const std::vector<std::uint64_t>& seeds) {
    if (c_values.empty() || fractions.empty()) fail(ErrorKind::Config, "ablation grids must be nonempty");
    if (seeds.empty()) fail(ErrorKind::Config, "no seeds given");
    const auto settings = dedup_settings(ablation_settings(c_values, fractions, world.steps()));
    const auto calib = calibration_images(world);
    const auto classifier = calibrate_classifier(calib, world.categories());
    const auto& dc = world.config.denoiser;
    const ToyFeatureProvider provider(dc.image_h, dc.image_w);
    const auto base = base_feature(provider, calib);

    std::vector<AblationRow> rows;
    // Fractions that round to the same step share one run.
    std::map<std::pair<double, std::size_t>, std::size_t> done;
    for (const auto& s : settings) {
        if (const auto it = done.find({s.c, s.n_switch}); it != done.end()) {
            AblationRow copy = rows[it->second];
            copy.setting = s;
            rows.push_back(std::move(copy));
            continue;
        }
        done[{s.c, s.n_switch}] = rows.size();
        ScheduleSpec spec;
        spec.kind = ScheduleKind::FairQueue;
        spec.n_switch = s.n_switch;
        spec.c = s.c;
        const auto samples = generate_samples(world, spec, seeds);
        AblationRow row{s, 0.0, 0.0, 0.0, {}};
        std::vector<std::size_t> preds;
        std::vector<std::vector<double>> feats;
        for (const auto& smp : samples) {
            preds.push_back(classifier.classify(smp.image));
            feats.push_back(provider.features(smp.image));
            row.expression.push_back(smp.expression(world));
            row.expression_mean += row.expression.back();
        }
        row.expression_mean /= static_cast<double>(samples.size());
        row.fd = fairness_discrepancy(CategoryDistribution::from_predictions(preds, world.categories()));
        row.ta_proxy = text_alignment(feats, base);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<AblationRow> cmd_ablate(const WorldConfig& wc, const fs::path& config_dir,
                                           const std::vector<double>& c_values, const std::vector<double>& fractions,
                                           const std::vector<std::uint64_t>& seeds, const fs::path& out_dir) {
    const World world(wc, config_dir);
    auto rows = run_ablation(world, c_values, fractions, seeds);
    ensure_dir(out_dir);
    {
        auto csv = open_out(out_dir / "ablation.csv");
        csv << "c,fraction,n_switch,fd,ta_proxy,planted_expression\n";
        for (const auto& r : rows)
            csv << r.setting.c << ',' << r.setting.fraction << ',' << r.setting.n_switch << ',' << r.fd << ','
                << r.ta_proxy << ',' << r.expression_mean << '\n';
    }
    RunManifest manifest{"ablate", {{"world", to_json(wc)}, {"c", c_values}, {"fractions", fractions}}, seeds,
                         {"ablation.csv"}};
    write_json(out_dir / "manifest.json", manifest.to_json());
    return rows;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOutcome {
    json metrics;  // FD, TA, FID, DS (null when not computable)
    std::vector<std::string> ids;
    std::vector<std::size_t> categories;
};

inline EvaluateOutcome cmd_evaluate(const json& j, const fs::path& config_dir, const fs::path& out_dir) {
    using config_detail::get;
    const std::string path = "evaluate";
    config_detail::check_keys(j, {"world", "images", "reference_images", "features", "reference_features",
                                  "base_embedding", "classifier", "provider", "categories", "ds_scores", "ta_scores"},
                              path);
    const WorldConfig wc = j.contains("world") ? parse_world(j.at("world"), path + ".world") : WorldConfig{};
    const auto& dc = wc.denoiser;
    auto resolve = [&](const std::string& key) {
        fs::path p = get<std::string>(j, key, "", path);
        return p.is_relative() ? config_dir / p : p;
    };

    std::uint64_t provider_seed = 0;
    std::size_t provider_dim = 16;
    if (j.contains("provider")) {
        const auto& p = j.at("provider");
        config_detail::check_keys(p, {"kind", "dim", "seed"}, path + ".provider");
        if (get<std::string>(p, "kind", "toy", path + ".provider") != "toy")
            fail(ErrorKind::Config, path + ".provider.kind: only the toy provider is built in; pass features instead");
        provider_dim = get(p, "dim", provider_dim, path + ".provider");
        provider_seed = get(p, "seed", provider_seed, path + ".provider");
    }
    const ToyFeatureProvider provider(dc.image_h, dc.image_w, provider_dim, provider_seed);

    struct Set {
        std::vector<std::string> ids;
        std::vector<std::vector<double>> feats;
        std::vector<Image> images;
    };
    auto load_set = [&](const std::string& image_key, const std::string& feature_key) -> std::optional<Set> {
        Set s;
        if (j.contains(feature_key)) {
            const auto m = fqem::read(resolve(feature_key));
            for (std::size_t i = 0; i < m.rows(); ++i) {
                s.ids.push_back(sample_id(m, i));
                s.feats.emplace_back(m.row(i).begin(), m.row(i).end());
            }
        }
        if (j.contains(image_key)) {
            const auto m = fqem::read(resolve(image_key));
            s.images = matrix_to_images(m, dc.image_h, dc.image_w);
            if (s.feats.empty()) {
                for (std::size_t i = 0; i < m.rows(); ++i) {
                    s.ids.push_back(sample_id(m, i));
                    s.feats.push_back(provider.features(s.images[i]));
                }
            }
        }
        if (s.feats.empty()) return std::nullopt;
        return s;
    };
    const auto gen = load_set("images", "features");
    if (!gen) fail(ErrorKind::Config, path + ": need images or features");
    const auto ref = load_set("reference_images", "reference_features");
    const std::size_t k = get<std::size_t>(j, "categories", wc.categories(), path);

    EvaluateOutcome out;
    out.ids = gen->ids;

    // FD
    if (!j.contains("classifier")) fail(ErrorKind::Config, path + ".classifier: required");
    const auto& cj = j.at("classifier");
    config_detail::check_keys(cj, {"kind", "cut", "calibration", "path"}, path + ".classifier");
    const auto kind = get<std::string>(cj, "kind", "", path + ".classifier");
    if (kind == "predictions") {
        std::map<std::string, std::size_t> by_id;
        fs::path p = get<std::string>(cj, "path", "", path + ".classifier");
        if (p.is_relative()) p = config_dir / p;
        for (const auto& [id, v] : read_two_column_csv(p)) {
            try {
                by_id[id] = std::stoul(v);
            } catch (const std::exception&) {
                fail(ErrorKind::Format, p.string() + ": category '" + v + "' for " + id);
            }
        }
        for (const auto& id : gen->ids) {
            const auto it = by_id.find(id);
            if (it == by_id.end()) fail(ErrorKind::MissingPair, "no prediction for sample " + id);
            out.categories.push_back(it->second);
        }
    } else if (kind == "toy") {
        if (gen->images.empty()) fail(ErrorKind::Config, path + ".classifier: the toy classifier needs images");
        std::optional<ToyClassifier> clf;
        if (cj.contains("cut")) {
            clf = ToyClassifier({get<double>(cj, "cut", 0.0, path + ".classifier")});
        } else {
            const auto cal = get<std::string>(cj, "calibration", "world", path + ".classifier");
            if (cal == "reference") {
                if (!ref || ref->images.empty())
                    fail(ErrorKind::Config, path + ".classifier: calibration on reference needs reference_images");
                clf = calibrate_classifier(ref->images, k);
            } else if (cal == "world") {
                clf = calibrate_classifier(calibration_images(World(wc, config_dir)), k);
            } else {
                fail(ErrorKind::Config, path + ".classifier.calibration: expected world or reference");
            }
        }
        for (const auto& img : gen->images) out.categories.push_back(clf->classify(img));
    } else {
        fail(ErrorKind::Config, path + ".classifier.kind: expected toy or predictions");
    }
    out.metrics["FD"] = fairness_discrepancy(CategoryDistribution::from_predictions(out.categories, k));
    out.metrics["n"] = gen->ids.size();

    // TA
    std::vector<double> ta_per(gen->ids.size(), std::nan(""));
    if (j.contains("ta_scores")) {
        out.metrics["TA"] = mean_score(read_score_csv(resolve("ta_scores")));
    } else {
        std::optional<std::vector<double>> base;
        if (j.contains("base_embedding")) {
            const auto m = fqem::read(resolve("base_embedding"));
            base = std::vector<double>(m.row(0).begin(), m.row(0).end());
        } else if (ref) {
            std::vector<double> mean(ref->feats.front().size(), 0.0);
            for (const auto& f : ref->feats)
                for (std::size_t i = 0; i < f.size(); ++i) mean[i] += f[i];
            base = mean;
        }
        if (base) {
            out.metrics["TA"] = text_alignment(gen->feats, *base);
            for (std::size_t i = 0; i < gen->feats.size(); ++i) ta_per[i] = cosine_similarity(gen->feats[i], *base);
        } else {
            out.metrics["TA"] = nullptr;
        }
    }

    // FID
    auto to_matrix = [](const std::vector<std::vector<double>>& f) {
        Matrix m(f.size(), f.front().size());
        for (std::size_t i = 0; i < f.size(); ++i) std::copy(f[i].begin(), f[i].end(), m.row(i).begin());
        return m;
    };
    out.metrics["FID"] = ref ? json(frechet_distance(to_matrix(gen->feats), to_matrix(ref->feats))) : json(nullptr);

    // DS
    std::vector<double> ds_per(gen->ids.size(), std::nan(""));
    if (j.contains("ds_scores")) {
        out.metrics["DS"] = mean_score(read_score_csv(resolve("ds_scores")));
    } else if (ref) {
        std::map<std::string, std::vector<double>> r, g;
        for (std::size_t i = 0; i < ref->ids.size(); ++i) r[ref->ids[i]] = ref->feats[i];
        for (std::size_t i = 0; i < gen->ids.size(); ++i) g[gen->ids[i]] = gen->feats[i];
        const auto sd = semantic_distance(r, g);
        out.metrics["DS"] = sd.mean;
        std::map<std::string, double> by_id(sd.per_pair.begin(), sd.per_pair.end());
        for (std::size_t i = 0; i < gen->ids.size(); ++i) ds_per[i] = by_id.at(gen->ids[i]);
    } else {
        out.metrics["DS"] = nullptr;
    }

    ensure_dir(out_dir);
    write_json(out_dir / "metrics.json", out.metrics);
    auto csv = open_out(out_dir / "per_sample.csv");
    csv << "sample_id,category,ta,ds\n";
    for (std::size_t i = 0; i < gen->ids.size(); ++i) {
        csv << gen->ids[i] << ',' << out.categories[i] << ',';
        if (!std::isnan(ta_per[i])) csv << ta_per[i];
        csv << ',';
        if (!std::isnan(ds_per[i])) csv << ds_per[i];
        csv << '\n';
    }
    return out;
}

}  // namespace fairqueue
