#pragma once

// Umbrella header for the whole library.

#include "hpgn/checkpoint.hpp"
#include "hpgn/config.hpp"
#include "hpgn/data.hpp"
#include "hpgn/errors.hpp"
#include "hpgn/eval.hpp"
#include "hpgn/forward_output.hpp"
#include "hpgn/gradcheck.hpp"
#include "hpgn/gradcheck_suite.hpp"
#include "hpgn/grid_graph.hpp"
#include "hpgn/layers.hpp"
#include "hpgn/losses.hpp"
#include "hpgn/model.hpp"
#include "hpgn/ops.hpp"
#include "hpgn/optim.hpp"
#include "hpgn/parallel.hpp"
#include "hpgn/sample.hpp"
#include "hpgn/sampling.hpp"
#include "hpgn/tape.hpp"
#include "hpgn/tensor.hpp"
#include "hpgn/train.hpp"
