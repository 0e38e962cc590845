#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/prompt.hpp"

namespace fairqueue {

enum class ScheduleKind { Constant, SwitchAt, FairQueue };

inline const char* to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Constant: return "constant";
        case ScheduleKind::SwitchAt: return "switch";
        case ScheduleKind::FairQueue: return "fairqueue";
    }
    return "unknown";
}

struct AmplificationSpec {
    double factor = 1.0;
    std::vector<std::size_t> tokens;
    bool stage1 = false;
    bool stage2 = true;

    bool active_in(int stage) const { return stage == 1 ? stage1 : stage2; }

    friend bool operator==(const AmplificationSpec&, const AmplificationSpec&) = default;
};

/// Total map from step to (prompt, amplification). Stage 1 is t < n_switch,
/// stage 2 is n_switch <= t < steps. A constant schedule is all stage 1.
struct PromptSchedule {
    ScheduleKind kind = ScheduleKind::Constant;
    ComposedPrompt stage1;
    std::optional<ComposedPrompt> stage2;
    std::size_t n_switch = 0;
    std::size_t steps = 0;
    std::optional<AmplificationSpec> amplification;

    friend bool operator==(const PromptSchedule&, const PromptSchedule&) = default;
};

namespace detail {

inline void check_tokens_in_tsa(const ComposedPrompt& p, const AmplificationSpec& amp, const char* which) {
    const auto [lo, hi] = p.tsa_token_range();
    for (std::size_t t : amp.tokens)
        if (t < lo || t >= hi)
            fail(ErrorKind::InvalidSchedule, std::string("amplified token ") + std::to_string(t) +
                                                 " outside the attribute tokens of the " + which + " prompt");
}

}  // namespace detail

inline PromptSchedule build_schedule(ScheduleKind kind, ComposedPrompt r1, std::optional<ComposedPrompt> r2,
                                     std::size_t n_switch, std::size_t steps,
                                     std::optional<AmplificationSpec> amp = std::nullopt) {
    if (steps < 1) fail(ErrorKind::InvalidSchedule, "schedule needs at least one step");
    PromptSchedule s{kind, std::move(r1), std::move(r2), n_switch, steps, std::move(amp)};
    if (kind == ScheduleKind::Constant) {
        if (s.stage2) fail(ErrorKind::InvalidSchedule, "constant schedule takes a single prompt");
        s.n_switch = steps;
    } else {
        if (!s.stage2) fail(ErrorKind::InvalidSchedule, "switching schedule needs a stage-2 prompt");
        if (n_switch > steps)
            fail(ErrorKind::InvalidSchedule,
                 "n_switch " + std::to_string(n_switch) + " exceeds step count " + std::to_string(steps));
        if (s.stage1.dim() != s.stage2->dim()) fail(ErrorKind::InvalidSchedule, "stage prompts differ in dim");
    }
    if (kind == ScheduleKind::FairQueue) {
        if (!s.stage1.groups.empty()) fail(ErrorKind::InvalidSchedule, "prompt queuing starts from the plain base prompt");
        if (s.stage2->groups.empty()) fail(ErrorKind::InvalidSchedule, "prompt queuing needs a learned-token prompt");
    }
    if (s.amplification) {
        const auto& a = *s.amplification;
        if (!(a.factor >= 0.0) || !std::isfinite(a.factor))
            fail(ErrorKind::InvalidSchedule, "amplification factor must be finite and nonnegative");
        if (a.stage1) detail::check_tokens_in_tsa(s.stage1, a, "stage-1");
        if (a.stage2 && s.stage2) detail::check_tokens_in_tsa(*s.stage2, a, "stage-2");
    }
    return s;
}

inline PromptSchedule constant_schedule(ComposedPrompt r, std::size_t steps,
                                        std::optional<AmplificationSpec> amp = std::nullopt) {
    if (amp) amp->stage1 = true, amp->stage2 = false;
    return build_schedule(ScheduleKind::Constant, std::move(r), std::nullopt, steps, steps, std::move(amp));
}

/// Learned prompt first, hard prompt from n_switch on.
inline PromptSchedule i2h_schedule(ComposedPrompt learned, ComposedPrompt hard, std::size_t n_switch,
                                   std::size_t steps) {
    return build_schedule(ScheduleKind::SwitchAt, std::move(learned), std::move(hard), n_switch, steps);
}

/// Hard prompt first, learned prompt from n_switch on.
inline PromptSchedule h2i_schedule(ComposedPrompt hard, ComposedPrompt learned, std::size_t n_switch,
                                   std::size_t steps) {
    return build_schedule(ScheduleKind::SwitchAt, std::move(hard), std::move(learned), n_switch, steps);
}

/// Base prompt for the first n_switch steps, then the learned prompt with its
/// attribute-token maps scaled by c (stage 2 unless told otherwise).
inline PromptSchedule fairqueue_schedule(ComposedPrompt base, ComposedPrompt learned, std::size_t n_switch, double c,
                                         std::size_t steps, bool amplify_stage1 = false, bool amplify_stage2 = true) {
    AmplificationSpec amp{c, learned.tsa_tokens(), amplify_stage1, amplify_stage2};
    return build_schedule(ScheduleKind::FairQueue, std::move(base), std::move(learned), n_switch, steps,
                          std::move(amp));
}

struct ScheduledPrompt {
    const ComposedPrompt* prompt = nullptr;
    std::optional<AttentionControl> control;
    int stage = 1;
};

inline ScheduledPrompt prompt_at(const PromptSchedule& s, std::size_t t) {
    if (t >= s.steps)
        fail(ErrorKind::InvalidStep, "step " + std::to_string(t) + " outside [0, " + std::to_string(s.steps) + ")");
    const int stage = t < s.n_switch ? 1 : 2;
    ScheduledPrompt out{stage == 1 ? &s.stage1 : &*s.stage2, std::nullopt, stage};
    if (s.amplification && s.amplification->active_in(stage))
        out.control = AttentionControl{s.amplification->factor, s.amplification->tokens};
    return out;
}

struct AblationSetting {
    double c = 0.0;
    double fraction = 0.0;
    std::size_t n_switch = 0;

    friend bool operator==(const AblationSetting&, const AblationSetting&) = default;
};

/// Cartesian product c x fraction, transition step rounded to nearest.
inline std::vector<AblationSetting> ablation_settings(const std::vector<double>& c_values,
                                                      const std::vector<double>& fractions, std::size_t steps) {
    if (steps < 1) fail(ErrorKind::InvalidSchedule, "ablation needs at least one step");
    std::vector<AblationSetting> out;
    for (double c : c_values)
        for (double f : fractions) {
            if (!(f >= 0.0 && f <= 1.0)) fail(ErrorKind::InvalidSchedule, "transition fraction outside [0, 1]");
            out.push_back({c, f, static_cast<std::size_t>(std::lround(f * static_cast<double>(steps)))});
        }
    return out;
}

inline std::vector<PromptSchedule> ablation_grid(const std::vector<double>& c_values,
                                                 const std::vector<double>& fractions, std::size_t steps,
                                                 const ComposedPrompt& base, const ComposedPrompt& learned) {
    std::vector<PromptSchedule> out;
    for (const auto& s : ablation_settings(c_values, fractions, steps))
        out.push_back(fairqueue_schedule(base, learned, s.n_switch, s.c, steps));
    return out;
}

}  // namespace fairqueue
