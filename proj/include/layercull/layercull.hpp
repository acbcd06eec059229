#pragma once

#include "layercull/calib.hpp"
#include "layercull/checkpoint.hpp"
#include "layercull/compensate.hpp"
#include "layercull/error.hpp"
#include "layercull/eval.hpp"
#include "layercull/magnitude.hpp"
#include "layercull/metrics.hpp"
#include "layercull/model.hpp"
#include "layercull/parallel.hpp"
#include "layercull/prune_log.hpp"
#include "layercull/pruner.hpp"
#include "layercull/rng.hpp"
#include "layercull/tensor.hpp"
#include "layercull/toy.hpp"
