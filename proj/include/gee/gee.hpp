#pragma once

#include "gee/correlation.hpp"
#include "gee/dataset_io.hpp"
#include "gee/diagnostics.hpp"
#include "gee/error.hpp"
#include "gee/estimating.hpp"
#include "gee/linalg.hpp"
#include "gee/model.hpp"
#include "gee/parallel.hpp"
#include "gee/random.hpp"
#include "gee/scenario_io.hpp"
#include "gee/simulation.hpp"
#include "gee/solver.hpp"
