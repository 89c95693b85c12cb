#pragma once

#include "z2/analysis.hpp"
#include "z2/experiment.hpp"
#include "z2/parallel.hpp"
#include "z2/samplers.hpp"
#include "z2/schedule.hpp"
#include "z2/scorefield.hpp"
#include "z2/solver.hpp"
#include "z2/types.hpp"
