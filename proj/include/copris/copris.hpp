#pragma once

#include "copris/cluster.hpp"
#include "copris/common.hpp"
#include "copris/grpo.hpp"
#include "copris/io.hpp"
#include "copris/metrics.hpp"
#include "copris/policy.hpp"
#include "copris/report.hpp"
#include "copris/rng.hpp"
#include "copris/rollout.hpp"
#include "copris/stage.hpp"
#include "copris/trainer.hpp"
#include "copris/trajectory.hpp"
