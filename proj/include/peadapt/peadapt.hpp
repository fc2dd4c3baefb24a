#pragma once

#include "peadapt/core/autograd.hpp"
#include "peadapt/core/error.hpp"
#include "peadapt/core/rng.hpp"
#include "peadapt/adapter.hpp"
#include "peadapt/prompt.hpp"
#include "peadapt/archive.hpp"
#include "peadapt/image.hpp"
#include "peadapt/host.hpp"
#include "peadapt/data.hpp"
#include "peadapt/metrics.hpp"
#include "peadapt/evaluator.hpp"
#include "peadapt/trainer.hpp"
#include "peadapt/kfold.hpp"
#include "peadapt/visualize.hpp"
#include "peadapt/config.hpp"
#include "peadapt/commands.hpp"
