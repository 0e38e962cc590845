// Command-line front end for the fairqueue harness.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fairqueue/fairqueue.hpp"

namespace fs = std::filesystem;
using namespace fairqueue;

namespace {

struct Common {
    std::string config;
    std::string seeds;
    std::uint64_t seed_base = 0;
    std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c, bool seeds = true) {
    cmd->add_option("--config", c.config, "config file, or inline JSON starting with '{'");
    cmd->add_option("--out", c.out, "output directory")->capture_default_str();
    if (seeds) {
        cmd->add_option("--seeds", c.seeds, "seed count N (seed-base..seed-base+N-1) or a file of seeds");
        cmd->add_option("--seed-base", c.seed_base, "first seed when --seeds is a count")->capture_default_str();
    }
}

json load_config(const Common& c) { return c.config.empty() ? json::object() : json_arg(c.config); }

fs::path config_dir(const Common& c) {
    if (c.config.empty() || c.config.front() == '{') return fs::current_path();
    return fs::absolute(c.config).parent_path();
}

std::vector<std::uint64_t> resolve_seeds(const Common& c, const RunConfig& rc) {
    if (!c.seeds.empty()) return parse_seeds(c.seeds, c.seed_base);
    if (rc.has_seeds) return rc.seeds;
    return parse_seeds("100", c.seed_base);
}

std::vector<double> parse_list(const std::string& text, const std::string& flag) {
    std::vector<double> out;
    std::stringstream in(text);
    for (std::string item; std::getline(in, item, ',');) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            fail(ErrorKind::Config, flag + ": '" + item + "' is not a number");
        }
    }
    return out;
}

std::vector<double> list_or(const std::string& flag_value, const std::string& flag, const json& cfg,
                            const std::string& key, std::vector<double> fallback) {
    if (!flag_value.empty()) return parse_list(flag_value, flag);
    return config_detail::get(cfg, key, fallback, "config");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fair text-to-image sampling experiments on a toy diffusion backend"};
    app.require_subcommand(1);

    Common learn_c, gen_c, sw_c, abl_c, eval_c, dump_c;

    auto* learn = app.add_subcommand("learn-tokens", "learn per-category prompt tokens from reference embeddings");
    add_common(learn, learn_c, false);

    auto* gen = app.add_subcommand("generate", "generate a sample set under a schedule");
    add_common(gen, gen_c);
    std::string gen_schedule;
    bool gen_dump = false;
    gen->add_option("--schedule", gen_schedule, "schedule JSON (file or inline); overrides the config's schedule");
    gen->add_flag("--dump-attention", gen_dump, "write per-seed attention dumps");

    auto* sw = app.add_subcommand("switch", "I2H/H2I prompt switching with stage-wise attention forensics");
    add_common(sw, sw_c);
    std::string sw_mode;
    std::optional<std::size_t> sw_n;
    std::optional<std::size_t> sw_bins;
    sw->add_option("--mode", sw_mode, "i2h or h2i");
    sw->add_option("--n-switch", sw_n, "switch step");
    sw->add_option("--bins", sw_bins, "histogram bins");

    auto* abl = app.add_subcommand("ablate", "sweep amplification factor and transition point");
    add_common(abl, abl_c);
    std::string abl_cs, abl_fr;
    abl->add_option("--c", abl_cs, "comma-separated amplification factors");
    abl->add_option("--fractions", abl_fr, "comma-separated transition fractions of the step count");

    auto* ev = app.add_subcommand("evaluate", "compute FD, TA, FID and DS for a sample set");
    add_common(ev, eval_c, false);

    auto* dump = app.add_subcommand("dump-attn", "write attention dumps, or inspect one");
    add_common(dump, dump_c);
    std::string dump_schedule, inspect;
    dump->add_option("--schedule", dump_schedule, "schedule JSON (file or inline)");
    dump->add_option("--inspect", inspect, "print the header of an existing dump and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*learn) {
            const auto out = cmd_learn_tokens(load_config(learn_c), config_dir(learn_c), learn_c.out);
            std::cout << "final mean L_dir " << out.result.loss_trace.back() << " after "
                      << out.result.loss_trace.size() - 1 << " iterations\n";
        } else if (*gen) {
            RunConfig rc = parse_run_config(load_config(gen_c));
            if (!gen_schedule.empty()) rc.schedule = parse_schedule(json_arg(gen_schedule));
            rc.seeds = resolve_seeds(gen_c, rc);
            const auto out = cmd_generate(rc, config_dir(gen_c), gen_c.out, gen_dump);
            std::cout << "wrote " << out.samples.size() << " samples to " << gen_c.out << " (run "
                      << out.manifest.at("run_id").get<std::string>() << ")\n";
        } else if (*sw) {
            const json cfg = load_config(sw_c);
            RunConfig rc = parse_run_config(cfg, {"mode", "n_switch", "bins"});
            const auto seeds = resolve_seeds(sw_c, rc);
            const std::string mode = sw_mode.empty() ? config_detail::get<std::string>(cfg, "mode", "i2h", "config") : sw_mode;
            const std::size_t steps = rc.world.denoiser.steps;
            const std::size_t n = sw_n ? *sw_n
                                       : config_detail::get<std::size_t>(
                                             cfg, "n_switch", static_cast<std::size_t>(std::lround(0.2 * steps)), "config");
            const std::size_t bins = sw_bins ? *sw_bins : config_detail::get<std::size_t>(cfg, "bins", 20, "config");
            const auto out = cmd_switch(rc.world, config_dir(sw_c), mode, n, seeds, sw_c.out, bins);
            std::cout << "switch " << mode << " at step " << n << ": " << out.samples.size() << " samples, "
                      << out.stages.size() << " stage(s) written to " << sw_c.out << "\n";
        } else if (*abl) {
            const json cfg = load_config(abl_c);
            RunConfig rc = parse_run_config(cfg, {"c", "fractions"});
            const auto seeds = resolve_seeds(abl_c, rc);
            const auto cs = list_or(abl_cs, "--c", cfg, "c", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
            const auto fr = list_or(abl_fr, "--fractions", cfg, "fractions", {0.0, 0.1, 0.2, 0.3});
            const auto rows = cmd_ablate(rc.world, config_dir(abl_c), cs, fr, seeds, abl_c.out);
            std::cout << "c,fraction,n_switch,fd,ta_proxy,planted_expression\n";
            for (const auto& r : rows)
                std::cout << r.setting.c << ',' << r.setting.fraction << ',' << r.setting.n_switch << ',' << r.fd << ','
                          << r.ta_proxy << ',' << r.expression_mean << '\n';
        } else if (*ev) {
            const auto out = cmd_evaluate(load_config(eval_c), config_dir(eval_c), eval_c.out);
            std::cout << out.metrics.dump(2) << '\n';
        } else if (*dump) {
            if (!inspect.empty()) {
                const auto d = read_dump(inspect);
                json layers = json::array();
                for (const auto& l : d.layers) layers.push_back({l.height, l.width});
                std::cout << json{{"version", AttentionDump::kVersion}, {"steps", d.steps}, {"tokens", d.tokens},
                                  {"layers", layers}, {"floats", d.payload.size()}}
                                 .dump(2)
                          << '\n';
                return 0;
            }
            RunConfig rc = parse_run_config(load_config(dump_c));
            if (!dump_schedule.empty()) rc.schedule = parse_schedule(json_arg(dump_schedule));
            rc.seeds = resolve_seeds(dump_c, rc);
            const auto out = cmd_generate(rc, config_dir(dump_c), dump_c.out, true);
            std::cout << "wrote " << out.samples.size() << " attention dumps to " << (fs::path(dump_c.out) / "attention")
                      << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error [io]: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
