#pragma once

#include "mmdit/bench.hpp"
#include "mmdit/checker.hpp"
#include "mmdit/checkpoint.hpp"
#include "mmdit/cli.hpp"
#include "mmdit/config.hpp"
#include "mmdit/diffusion.hpp"
#include "mmdit/editing.hpp"
#include "mmdit/grammar.hpp"
#include "mmdit/image.hpp"
#include "mmdit/interventions.hpp"
#include "mmdit/model.hpp"
#include "mmdit/numerics.hpp"
#include "mmdit/probe.hpp"
#include "mmdit/trainer.hpp"
