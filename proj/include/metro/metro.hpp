#pragma once

#include "metro/checkpoint.hpp"
#include "metro/config.hpp"
#include "metro/data.hpp"
#include "metro/encoder.hpp"
#include "metro/errors.hpp"
#include "metro/finetune.hpp"
#include "metro/fused_ops.hpp"
#include "metro/gradcheck.hpp"
#include "metro/gradcheck_suite.hpp"
#include "metro/objectives.hpp"
#include "metro/optim.hpp"
#include "metro/pipeline.hpp"
#include "metro/relpos.hpp"
#include "metro/rng.hpp"
#include "metro/tape.hpp"
#include "metro/tensor.hpp"
#include "metro/tokens.hpp"
#include "metro/trainer.hpp"
#include "metro/verify.hpp"
#include "metro/zero_planner.hpp"
