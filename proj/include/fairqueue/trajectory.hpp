#pragma once

#include <cstdint>
#include <vector>

#include "fairqueue/denoiser.hpp"
#include "fairqueue/schedule.hpp"

namespace fairqueue {

struct Trajectory {
    LatentState initial;
    LatentState final_state;
    std::vector<AttentionRecord> records;
    Image image;
};

struct TrajectoryOptions {
    std::uint64_t stream = 0;
    bool keep_records = true;
};

/// Z_0 from the seed, one backend step per schedule step, then decode.
inline Trajectory run_trajectory(const DenoiserBackend& backend, std::uint64_t seed, const PromptSchedule& schedule,
                                 const TrajectoryOptions& options = {}) {
    if (schedule.steps != backend.steps())
        fail(ErrorKind::InvalidSchedule, "schedule covers " + std::to_string(schedule.steps) +
                                             " steps but the backend runs " + std::to_string(backend.steps()));
    Trajectory out;
    out.initial = backend.initial_state(seed, options.stream);
    LatentState z = out.initial;
    if (options.keep_records) out.records.reserve(schedule.steps);
    for (std::size_t t = 0; t < schedule.steps; ++t) {
        const auto sp = prompt_at(schedule, t);
        StepResult r = backend.step(z, *sp.prompt, t, sp.control ? &*sp.control : nullptr);
        z = std::move(r.state);
        if (options.keep_records) out.records.push_back(std::move(r.record));
    }
    out.image = backend.decode(z);
    out.final_state = std::move(z);
    return out;
}

}  // namespace fairqueue
