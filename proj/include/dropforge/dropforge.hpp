#pragma once

#include "dropforge/calibration.hpp"
#include "dropforge/checkpoint.hpp"
#include "dropforge/config.hpp"
#include "dropforge/errors.hpp"
#include "dropforge/evalbench.hpp"
#include "dropforge/model.hpp"
#include "dropforge/planner.hpp"
#include "dropforge/rng.hpp"
#include "dropforge/scoring.hpp"
#include "dropforge/tensor.hpp"
#include "dropforge/train.hpp"
