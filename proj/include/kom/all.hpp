#pragma once

#include "kom/baselines.hpp"
#include "kom/core_model.hpp"
#include "kom/error.hpp"
#include "kom/estimate.hpp"
#include "kom/gp_tune.hpp"
#include "kom/kernels.hpp"
#include "kom/kom.hpp"
#include "kom/linalg.hpp"
#include "kom/qp_solver.hpp"
#include "kom/rng.hpp"
#include "kom/simulation.hpp"
