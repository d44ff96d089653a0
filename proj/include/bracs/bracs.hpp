#pragma once

// Umbrella header.

#include "bracs/numeric.hpp"
#include "bracs/model.hpp"
#include "bracs/barrier.hpp"
#include "bracs/decode.hpp"
#include "bracs/steering.hpp"
#include "bracs/engine.hpp"
#include "bracs/task.hpp"
#include "bracs/experiment.hpp"
#include "bracs/bench.hpp"
#include "bracs/report.hpp"
#include "bracs/config.hpp"
