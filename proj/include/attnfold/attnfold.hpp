// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attnfold/dense.hpp"
#include "attnfold/errors.hpp"
#include "attnfold/eval.hpp"
#include "attnfold/graph.hpp"
#include "attnfold/hw_model.hpp"
#include "attnfold/matcher.hpp"
#include "attnfold/pipeline.hpp"
#include "attnfold/sim.hpp"
#include "attnfold/tiler.hpp"
#include "attnfold/transforms.hpp"
