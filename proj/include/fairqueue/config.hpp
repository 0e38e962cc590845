#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/embedding.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/prompt.hpp"
#include "fairqueue/schedule.hpp"
#include "fairqueue/toy_world.hpp"

namespace fairqueue {

using nlohmann::json;

namespace config_detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& path) {
    if (!j.is_object()) fail(ErrorKind::Config, path + ": expected an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) fail(ErrorKind::Config, path + "." + key + ": unknown key");
}

template <typename T>
T get(const json& j, const std::string& key, const T& fallback, const std::string& path) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::Config, path + "." + key + ": wrong type");
    }
}

}  // namespace config_detail

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        fail(ErrorKind::Config, path.string() + ": " + e.what());
    }
}

/// Inline JSON when the argument starts with '{', otherwise a file path.
inline json json_arg(const std::string& arg) {
    if (!arg.empty() && arg.front() == '{') {
        try {
            return json::parse(arg);
        } catch (const json::parse_error& e) {
            fail(ErrorKind::Config, std::string("inline JSON: ") + e.what());
        }
    }
    return read_json_file(arg);
}

inline DenoiserConfig parse_denoiser(const json& j, const std::string& path = "denoiser") {
    using config_detail::get;
    config_detail::check_keys(j, {"latent", "channels", "layers", "steps", "embed_dim", "head_dim", "planted_channel",
                                  "attribute_channels", "beta", "gamma", "image", "weight_seed"},
                              path);
    DenoiserConfig c;
    const auto latent = get<std::vector<std::size_t>>(j, "latent", {c.latent_h, c.latent_w}, path);
    const auto image = get<std::vector<std::size_t>>(j, "image", {c.image_h, c.image_w}, path);
    if (latent.size() != 2) fail(ErrorKind::Config, path + ".latent: expected [h, w]");
    if (image.size() != 2) fail(ErrorKind::Config, path + ".image: expected [h, w]");
    c.latent_h = latent[0];
    c.latent_w = latent[1];
    c.image_h = image[0];
    c.image_w = image[1];
    c.channels = get(j, "channels", c.channels, path);
    if (j.contains("layers")) {
        const auto layers = get<std::vector<std::vector<std::size_t>>>(j, "layers", {}, path);
        c.layers.clear();
        for (const auto& l : layers) {
            if (l.size() != 2) fail(ErrorKind::Config, path + ".layers: each entry is [h_map, w_map]");
            c.layers.push_back({l[0], l[1]});
        }
    }
    c.steps = get(j, "steps", c.steps, path);
    c.embed_dim = get(j, "embed_dim", c.embed_dim, path);
    c.head_dim = get(j, "head_dim", c.head_dim, path);
    c.planted_channel = get(j, "planted_channel", c.planted_channel, path);
    c.attribute_channels = get(j, "attribute_channels", c.attribute_channels, path);
    c.beta = get(j, "beta", c.beta, path);
    c.gamma = get(j, "gamma", c.gamma, path);
    c.weight_seed = get(j, "weight_seed", c.weight_seed, path);
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorKind::Config, path + ": " + e.what());
    }
    return c;
}

inline json to_json(const DenoiserConfig& c) {
    json layers = json::array();
    for (const auto& l : c.layers) layers.push_back({l.height, l.width});
    return {{"latent", {c.latent_h, c.latent_w}},
            {"channels", c.channels},
            {"layers", layers},
            {"steps", c.steps},
            {"embed_dim", c.embed_dim},
            {"head_dim", c.head_dim},
            {"planted_channel", c.planted_channel},
            {"attribute_channels", c.attribute_channels},
            {"beta", c.beta},
            {"gamma", c.gamma},
            {"image", {c.image_h, c.image_w}},
            {"weight_seed", c.weight_seed}};
}

/// Everything needed to rebuild the toy backend and its prompts.
struct WorldConfig {
    DenoiserConfig denoiser;
    std::uint64_t vocab_seed = 0;
    std::string base_prompt = "a headshot of a person";
    std::string attribute = "smiling";
    std::vector<std::string> hard_prompts = {"smiling", "frowning"};
    // Either FQEM paths (one per category) or synthetic tokens.
    std::vector<std::string> learned_token_files;
    std::size_t synthetic_q = 3;
    std::uint64_t synthetic_seed = 1;
    std::size_t calibration_samples = 200;
    std::uint64_t calibration_seed_base = 1000000;

    std::size_t categories() const { return hard_prompts.size(); }
};

inline WorldConfig parse_world(const json& j, const std::string& path = "world") {
    using config_detail::get;
    config_detail::check_keys(j, {"denoiser", "vocab_seed", "base_prompt", "attribute", "hard_prompts", "learned_tokens",
                                  "calibration"},
                              path);
    WorldConfig w;
    if (j.contains("denoiser")) w.denoiser = parse_denoiser(j.at("denoiser"), path + ".denoiser");
    w.vocab_seed = get(j, "vocab_seed", w.vocab_seed, path);
    w.base_prompt = get(j, "base_prompt", w.base_prompt, path);
    w.attribute = get(j, "attribute", w.attribute, path);
    w.hard_prompts = get(j, "hard_prompts", w.hard_prompts, path);
    if (w.hard_prompts.size() < 2) fail(ErrorKind::Config, path + ".hard_prompts: need at least two categories");
    if (j.contains("learned_tokens")) {
        const auto& lt = j.at("learned_tokens");
        if (lt.is_array()) {
            w.learned_token_files = get<std::vector<std::string>>(j, "learned_tokens", {}, path);
            if (w.learned_token_files.size() != w.categories())
                fail(ErrorKind::Config, path + ".learned_tokens: need one file per category");
        } else {
            const std::string p = path + ".learned_tokens";
            config_detail::check_keys(lt, {"synthetic"}, p);
            const auto& syn = lt.at("synthetic");
            config_detail::check_keys(syn, {"q", "seed"}, p + ".synthetic");
            w.synthetic_q = get(syn, "q", w.synthetic_q, p + ".synthetic");
            w.synthetic_seed = get(syn, "seed", w.synthetic_seed, p + ".synthetic");
            if (w.synthetic_q == 0) fail(ErrorKind::Config, p + ".synthetic.q: must be at least 1");
        }
    }
    if (j.contains("calibration")) {
        const auto& cal = j.at("calibration");
        config_detail::check_keys(cal, {"samples", "seed_base"}, path + ".calibration");
        w.calibration_samples = get(cal, "samples", w.calibration_samples, path + ".calibration");
        w.calibration_seed_base = get(cal, "seed_base", w.calibration_seed_base, path + ".calibration");
    }
    return w;
}

inline json to_json(const WorldConfig& w) {
    json j = {{"denoiser", to_json(w.denoiser)},
              {"vocab_seed", w.vocab_seed},
              {"base_prompt", w.base_prompt},
              {"attribute", w.attribute},
              {"hard_prompts", w.hard_prompts},
              {"calibration", {{"samples", w.calibration_samples}, {"seed_base", w.calibration_seed_base}}}};
    if (w.learned_token_files.empty())
        j["learned_tokens"] = {{"synthetic", {{"q", w.synthetic_q}, {"seed", w.synthetic_seed}}}};
    else
        j["learned_tokens"] = w.learned_token_files;
    return j;
}

/// Resolved prompts: T (base), F_k (hard) and P_k (learned) per category.
struct World {
    WorldConfig config;
    ToyDenoiser denoiser;
    EmbeddingMatrix base;
    TsaGroup hard;
    TsaGroup learned;

    explicit World(WorldConfig c, const std::filesystem::path& relative_to = {})
        : config(std::move(c)), denoiser(config.denoiser) {
        const ToyVocabulary vocab(config.denoiser.embed_dim, config.vocab_seed);
        base = vocab.encode(config.base_prompt);
        hard = hard_prompt_group(vocab, config.attribute, config.hard_prompts);
        if (config.learned_token_files.empty()) {
            learned = synthetic_token_group(config.attribute, config.categories(), config.synthetic_q,
                                            config.denoiser.embed_dim, config.synthetic_seed);
        } else {
            learned.name = config.attribute;
            for (std::size_t k = 0; k < config.learned_token_files.size(); ++k) {
                std::filesystem::path p = config.learned_token_files[k];
                if (p.is_relative() && !relative_to.empty()) p = relative_to / p;
                auto m = fqem::read(p);
                if (m.dim() != config.denoiser.embed_dim)
                    fail(ErrorKind::Config, "learned tokens " + p.string() + " have dim " + std::to_string(m.dim()) +
                                                ", backend expects " + std::to_string(config.denoiser.embed_dim));
                learned.categories.push_back({k, std::move(m)});
            }
        }
    }

    std::size_t categories() const { return config.categories(); }
    std::size_t steps() const { return config.denoiser.steps; }

    ComposedPrompt base_prompt() const { return ComposedPrompt::plain(base); }
    ComposedPrompt hard_prompt(std::size_t k) const { return compose_prompt(base, {hard}, {k}); }
    ComposedPrompt learned_prompt(std::size_t k) const { return compose_prompt(base, {learned}, {k}); }

    ComposedPrompt prompt(const std::string& which, std::size_t k) const {
        if (which == "base") return base_prompt();
        if (which == "hard") return hard_prompt(k);
        if (which == "learned") return learned_prompt(k);
        fail(ErrorKind::Config, "unknown prompt reference '" + which + "' (base, hard, learned)");
    }
};

/// Parsed schedule JSON: kind, switch step, amplification, prompt references.
struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::FairQueue;
    std::optional<std::size_t> n_switch;  // default: round(0.2 * steps)
    double c = 10.0;
    bool stage1 = false;
    bool stage2 = true;
    std::string prompt = "learned";  // constant
    std::string stage1_prompt = "learned";
    std::string stage2_prompt = "hard";
    std::optional<std::size_t> category;  // unset: balanced, category = index mod K

    std::size_t resolved_switch(std::size_t steps) const {
        return n_switch ? *n_switch : static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(steps)));
    }

    std::size_t category_for(std::size_t sample_index, std::size_t k) const {
        return category ? *category : sample_index % k;
    }

    PromptSchedule build(const World& world, std::size_t k) const {
        const std::size_t l = world.steps();
        switch (kind) {
            case ScheduleKind::Constant: {
                std::optional<AmplificationSpec> amp;
                auto p = world.prompt(prompt, k);
                if (c != 1.0 && stage1 && !p.groups.empty()) amp = AmplificationSpec{c, p.tsa_tokens(), true, false};
                return constant_schedule(std::move(p), l, std::move(amp));
            }
            case ScheduleKind::SwitchAt:
                return build_schedule(ScheduleKind::SwitchAt, world.prompt(stage1_prompt, k),
                                      world.prompt(stage2_prompt, k), resolved_switch(l), l);
            case ScheduleKind::FairQueue:
                return fairqueue_schedule(world.base_prompt(), world.learned_prompt(k), resolved_switch(l), c, l,
                                          stage1, stage2);
        }
        fail(ErrorKind::Config, "unknown schedule kind");
    }
};

inline ScheduleSpec parse_schedule(const json& j, const std::string& path = "schedule") {
    using config_detail::get;
    config_detail::check_keys(j, {"kind", "n_switch", "c", "stages", "prompt_refs"}, path);
    ScheduleSpec s;
    const auto kind = get<std::string>(j, "kind", "fairqueue", path);
    if (kind == "constant") {
        s.kind = ScheduleKind::Constant;
        s.c = 1.0;
        s.stage1 = false;
    } else if (kind == "switch") {
        s.kind = ScheduleKind::SwitchAt;
    } else if (kind == "fairqueue") {
        s.kind = ScheduleKind::FairQueue;
    } else {
        fail(ErrorKind::Config, path + ".kind: expected constant, switch or fairqueue, got '" + kind + "'");
    }
    if (j.contains("n_switch")) {
        const auto& n = j.at("n_switch");
        if (!n.is_number_integer() || n.get<long long>() < 0)
            fail(ErrorKind::Config, path + ".n_switch: expected a nonnegative integer");
        s.n_switch = n.get<std::size_t>();
    }
    s.c = get(j, "c", s.c, path);
    if (!(s.c >= 0.0) || !std::isfinite(s.c)) fail(ErrorKind::Config, path + ".c: must be finite and nonnegative");
    if (j.contains("stages")) {
        const auto stages = get<std::vector<int>>(j, "stages", {}, path);
        s.stage1 = s.stage2 = false;
        for (int st : stages) {
            if (st == 1)
                s.stage1 = true;
            else if (st == 2)
                s.stage2 = true;
            else
                fail(ErrorKind::Config, path + ".stages: entries must be 1 or 2");
        }
    } else if (s.kind == ScheduleKind::Constant && j.contains("c")) {
        s.stage1 = true;  // amplification on a constant prompt runs throughout
    }
    if (j.contains("prompt_refs")) {
        const auto& r = j.at("prompt_refs");
        const std::string p = path + ".prompt_refs";
        config_detail::check_keys(r, {"prompt", "stage1", "stage2", "category"}, p);
        s.prompt = get(r, "prompt", s.prompt, p);
        s.stage1_prompt = get(r, "stage1", s.stage1_prompt, p);
        s.stage2_prompt = get(r, "stage2", s.stage2_prompt, p);
        for (const auto* name : {&s.prompt, &s.stage1_prompt, &s.stage2_prompt})
            if (*name != "base" && *name != "hard" && *name != "learned")
                fail(ErrorKind::Config, p + ": prompt reference '" + *name + "' is not base, hard or learned");
        if (r.contains("category")) {
            const auto& cat = r.at("category");
            if (cat.is_string() && cat.get<std::string>() == "balanced") {
                s.category.reset();
            } else if (cat.is_number_integer() && cat.get<long long>() >= 0) {
                s.category = cat.get<std::size_t>();
            } else {
                fail(ErrorKind::Config, p + ".category: expected a category index or \"balanced\"");
            }
        }
    }
    return s;
}

inline json to_json(const ScheduleSpec& s) {
    json stages = json::array();
    if (s.stage1) stages.push_back(1);
    if (s.stage2) stages.push_back(2);
    json refs = {{"prompt", s.prompt}, {"stage1", s.stage1_prompt}, {"stage2", s.stage2_prompt}};
    if (s.category)
        refs["category"] = *s.category;
    else
        refs["category"] = "balanced";
    json j = {{"kind", to_string(s.kind)}, {"c", s.c}, {"stages", stages}, {"prompt_refs", refs}};
    if (s.n_switch) j["n_switch"] = *s.n_switch;
    return j;
}

/// "--seeds": a count N (seeds base..base+N-1) or a file with one seed per line.
inline std::vector<std::uint64_t> parse_seeds(const std::string& arg, std::uint64_t base = 0) {
    std::vector<std::uint64_t> seeds;
    if (!arg.empty() && std::all_of(arg.begin(), arg.end(), [](unsigned char c) { return std::isdigit(c); })) {
        const auto n = std::stoull(arg);
        for (std::uint64_t i = 0; i < n; ++i) seeds.push_back(base + i);
        return seeds;
    }
    std::ifstream in(arg);
    if (!in) fail(ErrorKind::Io, "cannot open seed file: " + arg);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.front() == '#') continue;
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(line, &used));
            if (line.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(line);
        } catch (const std::exception&) {
            fail(ErrorKind::Config, arg + ":" + std::to_string(lineno) + ": not a seed");
        }
    }
    return seeds;
}

/// FNV-1a over the canonical (key-sorted) JSON text.
inline std::string config_hash(const json& j) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char ch : j.dump()) h = (h ^ ch) * 0x100000001B3ULL;
    std::ostringstream out;
    out << std::hex;
    out.width(16);
    out.fill('0');
    out << h;
    return out.str();
}

}  // namespace fairqueue
