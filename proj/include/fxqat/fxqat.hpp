#pragma once

#include "fxqat/error.hpp"
#include "fxqat/fxp_core.hpp"
#include "fxqat/qat.hpp"
#include "fxqat/container.hpp"
#include "fxqat/features.hpp"
#include "fxqat/nn_graph.hpp"
#include "fxqat/fxp_engine.hpp"
#include "fxqat/trainer.hpp"
