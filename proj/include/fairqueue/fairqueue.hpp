#pragma once

// Umbrella header.
#include "fairqueue/attention_dump.hpp"
#include "fairqueue/config.hpp"
#include "fairqueue/denoiser.hpp"
#include "fairqueue/embedding.hpp"
#include "fairqueue/error.hpp"
#include "fairqueue/fairness.hpp"
#include "fairqueue/forensics.hpp"
#include "fairqueue/harness.hpp"
#include "fairqueue/numerics.hpp"
#include "fairqueue/parallel.hpp"
#include "fairqueue/prompt.hpp"
#include "fairqueue/prompt_learner.hpp"
#include "fairqueue/schedule.hpp"
#include "fairqueue/toy_world.hpp"
#include "fairqueue/trajectory.hpp"
