// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "fairqueue/fairqueue.hpp"
#include "synthetic_maps.hpp"
#include "temp_dir.hpp"

using namespace fairqueue;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

class Check {
public:
    void require(bool ok, const std::string& what) {
        if (ok) return;
        failures_ += (failures_.empty() ? "" : "; ") + what;
    }
    void note(const std::string& s) { note_ = s; }
    Outcome result() const {
        if (failures_.empty()) return {true, note_};
        return {false, note_.empty() ? failures_ : failures_ + " | " + note_};
    }

private:
    std::string failures_, note_;
};

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

const World& world() {
    static const World w{WorldConfig{}};
    return w;
}

std::vector<std::uint64_t> seed_range(std::uint64_t n, std::uint64_t base = 0) {
    std::vector<std::uint64_t> s(n);
    for (std::uint64_t i = 0; i < n; ++i) s[i] = base + i;
    return s;
}

bool same_trajectory(const PromptSchedule& a, const PromptSchedule& b, std::uint64_t seed) {
    const auto ta = run_trajectory(world().denoiser, seed, a);
    const auto tb = run_trajectory(world().denoiser, seed, b);
    return ta.final_state == tb.final_state && ta.records == tb.records && ta.image.values == tb.image.values;
}

// 1
void degenerate_schedules(Check& c) {
    const auto& w = world();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const std::size_t k = seed % 2;
        c.require(same_trajectory(fairqueue_schedule(w.base_prompt(), w.learned_prompt(k), 50, 10.0, 50),
                                  constant_schedule(w.base_prompt(), 50), seed),
                  "FairQueue(n=l) differs from Constant(T)");
        c.require(same_trajectory(fairqueue_schedule(w.base_prompt(), w.learned_prompt(k), 0, 1.0, 50),
                                  constant_schedule(w.learned_prompt(k), 50), seed),
                  "FairQueue(n=0,c=1) differs from Constant(P)");
        c.require(same_trajectory(i2h_schedule(w.learned_prompt(k), w.hard_prompt(k), 0, 50),
                                  constant_schedule(w.hard_prompt(k), 50), seed),
                  "I2H(n=0) differs from Constant(F)");
        c.require(same_trajectory(h2i_schedule(w.hard_prompt(k), w.learned_prompt(k), 0, 50),
                                  constant_schedule(w.learned_prompt(k), 50), seed),
                  "H2I(n=0) differs from Constant(P)");
    }
    c.note("4 equivalences x 10 seeds identical");
}

// 2
void attention_normalisation(Check& c) {
    const auto& w = world();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const std::size_t k = seed % 2;
        const auto sched = seed % 3 == 0   ? fairqueue_schedule(w.base_prompt(), w.learned_prompt(k), 10, 10.0, 50)
                           : seed % 3 == 1 ? i2h_schedule(w.learned_prompt(k), w.hard_prompt(k), 10, 50)
                                           : constant_schedule(w.hard_prompt(k), 50);
        const auto tr = run_trajectory(w.denoiser, seed, sched);
        for (const auto& rec : tr.records)
            for (const auto& l : rec.layers)
                for (std::size_t cell = 0; cell < l.cells(); ++cell) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < l.tokens; ++t) s += l.raw_map(t)[cell];
                    worst = std::max(worst, std::fabs(s - 1.0));
                }
    }
    c.require(worst <= 1e-6, "max |sum - 1| = " + fmt(worst));
    c.note("max |sum - 1| = " + fmt(worst));
}

// 3
void central_moment_oracle(Check& c) {
    SeededRng rng(3, 0);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = i % 2 ? 16 : 8;
        Grid2D g(n, n);
        for (double& v : g.values) v = rng.uniform();
        const double ref = testing::naive_central_moment(g);
        worst = std::max(worst, std::fabs(central_moment(g) - ref) / ref);
    }
    const double uni = central_moment(Grid2D(3, 3, std::vector<double>(9, 1.0)));
    c.require(worst <= 1e-10, "max relative error " + fmt(worst));
    c.require(std::fabs(uni - 4.0 / 3.0) <= 1e-12, "uniform 3x3 gives " + fmt(uni));
    c.note("max relative error " + fmt(worst));
}

// 4
void amplitude_oracle(Check& c) {
    SeededRng rng(4, 0);
    std::mt19937_64 shuffler(4);
    double worst = 0.0;
    bool invariant = true;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = 4 + i % 29;
        Grid2D g(n, n);
        for (double& v : g.values) v = rng.uniform();
        worst = std::max(worst, std::fabs(amplitude(g) - testing::naive_mean(g)));
        Grid2D p = g;
        std::shuffle(p.values.begin(), p.values.end(), shuffler);
        invariant = invariant && amplitude(p) == amplitude(g);
    }
    c.require(worst <= 1e-12, "max error " + fmt(worst));
    c.require(invariant, "amplitude changed under permutation");
    c.note("max error " + fmt(worst));
}

// 5
void window_additivity(Check& c) {
    const auto& w = world();
    const AccumulateOptions opts{false, true};
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto tr = run_trajectory(w.denoiser, seed, i2h_schedule(w.learned_prompt(seed % 2), w.hard_prompt(seed % 2), 10, 50));
        for (std::size_t token : {1u, 4u}) {
            const auto full = accumulate(tr.records, token, {0, 50}, 64, 64, opts);
            for (std::size_t n : {0u, 10u, 25u, 50u}) {
                const auto a = accumulate(tr.records, token, {0, n}, 64, 64, opts);
                const auto b = accumulate(tr.records, token, {n, 50}, 64, 64, opts);
                for (std::size_t i = 0; i < full.grid.size(); ++i)
                    worst = std::max(worst, std::fabs(full.grid.values[i] - a.grid.values[i] - b.grid.values[i]));
            }
        }
    }
    c.require(worst <= 1e-9, "max deviation " + fmt(worst));
    c.note("max deviation " + fmt(worst));
}

// 6
void prompt_learner(Check& c) {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const std::size_t k = 2 + seed % 3, d = 6 + seed % 5, fd = 4 + seed % 4, q = 1 + seed % 3;
        SeededRng rng(seed, 21);
        auto gauss = [&](std::size_t r, std::size_t cols, double s) {
            Matrix m(r, cols);
            for (double& v : m.data) v = s * rng.normal();
            return EmbeddingMatrix(std::move(m));
        };
        const auto base = gauss(5, d, 1.0);
        ReferenceSet refs;
        std::vector<EmbeddingMatrix> tokens;
        for (std::size_t i = 0; i < k; ++i) {
            refs.categories.push_back(gauss(7, fd, 1.0));
            tokens.push_back(gauss(q, d, 0.5));
        }
        const MeanPoolProjectionEncoder enc(d, fd, seed);
        const DirectionalObjective obj(base, refs, enc);
        const auto grads = obj.gradient(tokens);
        std::vector<double> analytic, numeric;
        for (std::size_t t = 0; t < k; ++t)
            for (std::size_t i = 0; i < tokens[t].data.data.size(); ++i) {
                auto plus = tokens, minus = tokens;
                plus[t].data.data[i] += 1e-5;
                minus[t].data.data[i] -= 1e-5;
                numeric.push_back((obj.value(plus) - obj.value(minus)) / 2e-5);
                analytic.push_back(grads[t].data[i]);
            }
        double scale = 0.0;
        for (double v : numeric) scale = std::max(scale, std::fabs(v));
        for (std::size_t i = 0; i < analytic.size(); ++i)
            worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) /
                                        std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), 1e-3 * scale}));
    }
    c.require(worst < 1e-4, "gradient relative error " + fmt(worst));

    const ToyVocabulary vocab(16, 0);
    const auto base = vocab.encode("a headshot of a person");
    const MeanPoolProjectionEncoder enc(16, 8, 5);
    const auto rr = realizable_references(base, enc, 2, 200, 3, 9);
    const auto res = learn_tokens(base, rr.refs, enc, LearnConfig{});
    std::size_t rises = 0, first = 0;
    for (std::size_t i = 1; i < res.loss_trace.size(); ++i)
        if (res.loss_trace[i] > res.loss_trace[i - 1] && rises++ == 0) first = i;
    c.require(res.loss_trace.back() < 1e-3, "final L_dir " + fmt(res.loss_trace.back()));
    c.require(rises == 0, std::to_string(rises) + " increases in the Adam loss trace, first at iteration " +
                              std::to_string(first) + " from " + fmt(first ? res.loss_trace[first - 1] : 0.0));
    c.note("grad rel err " + fmt(worst) + ", final L_dir " + fmt(res.loss_trace.back()));
}

// 7
void directional_identities(Check& c) {
    SeededRng rng(7, 0);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        std::vector<double> u(8), v(8), neg(8), scaled(8);
        for (double& x : u) x = rng.normal();
        for (double& x : v) x = rng.normal();
        for (std::size_t j = 0; j < 8; ++j) neg[j] = -u[j], scaled[j] = 3.7 * v[j];
        // Gram-Schmidt for an orthogonal partner.
        const double proj = dot(v, u) / dot(u, u);
        std::vector<double> orth(8);
        for (std::size_t j = 0; j < 8; ++j) orth[j] = v[j] - proj * u[j];
        worst = std::max({worst, std::fabs(directional_loss(u, u)), std::fabs(directional_loss(u, neg) - 2.0),
                          std::fabs(directional_loss(u, orth) - 1.0),
                          std::fabs(directional_loss(u, scaled) - directional_loss(u, v))});
    }
    c.require(worst <= 1e-12, "max deviation " + fmt(worst));
    c.note("max deviation " + fmt(worst));
}

// 8
void fairness_discrepancy_checks(Check& c) {
    c.require(fairness_discrepancy({{250, 250}}) == 0.0 && fairness_discrepancy({{4, 4, 4, 4, 4, 4}}) == 0.0,
              "uniform counts not exactly 0");
    const double fd = fairness_discrepancy({{255, 245}});
    c.require(std::fabs(fd - 1.414e-2) <= 1e-6 + 1.4e-5 && std::fabs(fd - std::sqrt(2.0) * 0.01) <= 1e-6,
              "[255,245] gives " + fmt(fd));
    SeededRng rng(8, 0);
    bool bounded = true;
    for (int i = 0; i < 10000; ++i) {
        const std::size_t k = 2 + i % 8;
        CategoryDistribution d{std::vector<std::size_t>(k)};
        for (auto& n : d.counts) n = rng.next_u64() % 100;
        d.counts[rng.next_u64() % k] += 1;
        bounded = bounded && fairness_discrepancy(d) <= std::sqrt((k - 1.0) / k) + 1e-15;
    }
    c.require(bounded, "bound exceeded");
    c.note("[255,245] -> " + fmt(fd));
}

// Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
Matrix random_rotation(std::size_t d, SeededRng& rng) {
    Matrix q(d, d);
    for (double& v : q.data) v = rng.normal();
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double dp = 0.0;
            for (std::size_t i = 0; i < d; ++i) dp += q(i, j) * q(i, p);
            for (std::size_t i = 0; i < d; ++i) q(i, j) -= dp * q(i, p);
        }
        double n = 0.0;
        for (std::size_t i = 0; i < d; ++i) n += q(i, j) * q(i, j);
        n = std::sqrt(n);
        for (std::size_t i = 0; i < d; ++i) q(i, j) /= n;
    }
    return q;
}

// 9
void frechet_checks(Check& c) {
    constexpr std::size_t d = 6;
    SeededRng rng(9, 0);
    const Matrix r = random_rotation(d, rng);
    std::vector<double> m1(d), m2(d), s1(d), s2(d);
    for (std::size_t i = 0; i < d; ++i) {
        m1[i] = rng.normal();
        m2[i] = m1[i] + 0.05 * rng.normal();
        s1[i] = 0.5 + 0.5 * rng.uniform();  // standard deviations
        s2[i] = 0.5 + 0.5 * rng.uniform();
    }
    // Shared rotation: FID equals the diagonal closed form.
    double closed = 0.0;
    for (std::size_t i = 0; i < d; ++i) closed += (m1[i] - m2[i]) * (m1[i] - m2[i]) + (s1[i] - s2[i]) * (s1[i] - s2[i]);
    auto stats = [&](const std::vector<double>& m, const std::vector<double>& s) {
        GaussianStats g{m, Matrix(d, d)};
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t k = 0; k < d; ++k) g.cov(i, j) += r(i, k) * s[k] * s[k] * r(j, k);
        return g;
    };
    const double exact = frechet_distance(stats(m1, s1), stats(m2, s2));
    c.require(std::fabs(exact - closed) <= 1e-6, "population FID " + fmt(exact) + " vs closed form " + fmt(closed));

    auto draw = [&](const std::vector<double>& m, const std::vector<double>& s, std::uint64_t seed) {
        SeededRng g(seed, 1);
        Matrix x(5000, d);
        std::vector<double> z(d);
        for (std::size_t n = 0; n < 5000; ++n) {
            for (std::size_t k = 0; k < d; ++k) z[k] = s[k] * g.normal();
            for (std::size_t i = 0; i < d; ++i) {
                double v = m[i];
                for (std::size_t k = 0; k < d; ++k) v += r(i, k) * z[k];
                x(n, i) = v;
            }
        }
        return x;
    };
    const Matrix a = draw(m1, s1, 1), b = draw(m2, s2, 2);
    const double sampled = frechet_distance(a, b);
    c.require(std::fabs(sampled - closed) <= 0.05, "sampled FID " + fmt(sampled) + " vs " + fmt(closed));
    const double self = frechet_distance(a, a);
    c.require(self < 1e-6, "identical sets give " + fmt(self));
    const double asym = std::fabs(frechet_distance(a, b) - frechet_distance(b, a));
    c.require(asym <= 1e-8, "asymmetry " + fmt(asym));
    c.note("closed " + fmt(closed) + ", population " + fmt(exact) + ", sampled " + fmt(sampled));
}

// 10
void ablation_trend(Check& c) {
    const auto& w = world();
    const auto seeds = seed_range(500);
    const std::vector<double> cs{0, 1, 2, 5, 10, 12};
    std::vector<std::vector<double>> expr;
    std::vector<double> fd;
    const auto clf = calibrate_classifier(calibration_images(w), w.categories());
    for (double cv : cs) {
        ScheduleSpec spec;
        spec.c = cv;
        spec.n_switch = 10;
        const auto samples = generate_samples(w, spec, seeds);
        std::vector<double> e;
        std::vector<std::size_t> preds;
        for (const auto& s : samples) {
            e.push_back(s.expression(w));
            preds.push_back(clf.classify(s.image));
        }
        expr.push_back(std::move(e));
        fd.push_back(fairness_discrepancy(CategoryDistribution::from_predictions(preds, w.categories())));
    }
    std::size_t violations = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = 1; j < cs.size(); ++j) violations += expr[j][i] < expr[j - 1][i];
    c.require(violations == 0, std::to_string(violations) + " per-seed decreases in c");
    c.require(fd[4] <= fd[0], "FD(c=10) " + fmt(fd[4]) + " > FD(c=0) " + fmt(fd[0]));

    ScheduleSpec late;
    late.c = 10;
    late.n_switch = 30;
    double early_mean = 0.0, late_mean = 0.0;
    for (double v : expr[4]) early_mean += v / 500.0;
    for (const auto& s : generate_samples(w, late, seeds)) late_mean += s.expression(w) / 500.0;
    c.require(late_mean < early_mean, "expression at 0.6l " + fmt(late_mean) + " not below 0.2l " + fmt(early_mean));
    c.note("FD c=0 " + fmt(fd[0]) + ", c=10 " + fmt(fd[4]) + "; expression 0.2l " + fmt(early_mean) + ", 0.6l " +
           fmt(late_mean));
}

// 11
void abnormality_separation(Check& c) {
    SeededRng rng(11, 0);
    std::vector<SampleMaps> scattered, concentrated;
    for (std::uint64_t i = 0; i < 500; ++i) {
        scattered.push_back({i, {{"S", testing::scattered_map(rng, 64, 64)}}, {}});
        concentrated.push_back({i, {{"S", testing::concentrated_map(rng, 64, 64)}}, {}});
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    };
    const double a = median(abnormality_report(scattered, "stage1").values("central_moment"));
    const double b = median(abnormality_report(concentrated, "stage1").values("central_moment"));
    c.require(a >= 2.0 * b, "median ratio " + fmt(a / b));
    c.note("median central moment " + fmt(a) + " vs " + fmt(b) + " (ratio " + fmt(a / b) + ")");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 12
void io_and_reproducibility(Check& c) {
    testing::TempDir dir("accept");
    SeededRng rng(12, 0);
    bool fqem_ok = true, fqat_ok = true;
    for (int i = 0; i < 20; ++i) {
        const std::size_t rows = 1 + rng.next_u64() % 40, cols = 1 + rng.next_u64() % 70;
        Matrix m(rows, cols);
        for (double& v : m.data) v = static_cast<float>(rng.normal() * 100.0);
        const EmbeddingMatrix e(m);
        fqem::write(dir / "r.fqem", e);
        fqem_ok = fqem_ok && fqem::read(dir / "r.fqem").data == e.data;

        AttentionDump d;
        d.steps = static_cast<std::uint32_t>(rng.next_u64() % 6);
        d.tokens = static_cast<std::uint32_t>(1 + rng.next_u64() % 9);
        for (std::size_t l = 0; l < 1 + rng.next_u64() % 3; ++l) d.layers.push_back({1 + rng.next_u64() % 9, 1 + rng.next_u64() % 9});
        d.payload.resize(d.expected_payload());
        for (float& v : d.payload) v = static_cast<float>(rng.uniform());
        write_dump(dir / "r.fqat", d);
        const auto back = read_dump(dir / "r.fqat");
        fqat_ok = fqat_ok && back == d &&
                  std::memcmp(back.payload.data(), d.payload.data(), d.payload.size() * sizeof(float)) == 0;
    }
    c.require(fqem_ok, "FQEM round trip not exact");
    c.require(fqat_ok, "FQAT round trip not exact");

    // Default settings spelled out explicitly, end to end.
    const auto cfg = json::parse(R"({
        "world": {"denoiser": {"steps": 50}},
        "schedule": {"kind": "fairqueue", "n_switch": 10, "c": 10},
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7]
    })");
    const auto rc = parse_run_config(cfg);
    const auto out = cmd_generate(rc, ".", dir / "run", true);
    c.require(out.samples.size() == 8 && fs::exists(dir / "run/attention/7.fqat"), "default run incomplete");
    const auto rerun = parse_run_config(read_json_file(dir / "run/manifest.json"));
    cmd_generate(rerun, ".", dir / "rerun", true);
    c.require(slurp(dir / "run/images.fqem") == slurp(dir / "rerun/images.fqem"), "manifest rerun images differ");
    c.require(slurp(dir / "run/attention/3.fqat") == slurp(dir / "rerun/attention/3.fqat"),
              "manifest rerun dumps differ");

    const auto learn = cmd_learn_tokens(
        json::parse(R"({"refs":{"synthetic":{"categories":2,"per_category":50}},"q":3,"iters":200})"), ".",
        dir / "learn");
    c.require(learn.result.tokens.size() == 2 && learn.result.tokens[0].tokens.rows() == 3, "q=3 tokens not produced");
    c.note("round trips exact, rerun identical, defaults l=50 c=10 n=10 q=3 ran");
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<void(Check&)> run;
        double budget_s;  // 0 means no runtime bound
    };
    const std::vector<Criterion> criteria{
        {1, "degenerate schedule equivalences", degenerate_schedules, 5.0},
        {2, "cross-attention normalisation", attention_normalisation, 0},
        {3, "central moment oracle", central_moment_oracle, 0},
        {4, "amplitude oracle", amplitude_oracle, 0},
        {5, "window additivity", window_additivity, 0},
        {6, "prompt learner", prompt_learner, 30.0},
        {7, "directional loss identities", directional_identities, 0},
        {8, "fairness discrepancy", fairness_discrepancy_checks, 0},
        {9, "Frechet distance", frechet_checks, 0},
        {10, "ablation trend", ablation_trend, 60.0},
        {11, "abnormality separation", abnormality_separation, 0},
        {12, "I/O and reproducibility", io_and_reproducibility, 0},
    };
    int failures = 0;
    for (const auto& cr : criteria) {
        Check check;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            cr.run(check);
        } catch (const std::exception& e) {
            check.require(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (cr.budget_s > 0) check.require(secs < cr.budget_s, "runtime " + fmt(secs) + " s over " + fmt(cr.budget_s) + " s");
        const auto r = check.result();
        failures += !r.pass;
        std::printf("%s %2d %s: %s [%.2f s]\n", r.pass ? "PASS" : "FAIL", cr.id, cr.name, r.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
