// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "slpt/backbone.hpp"
#include "slpt/cascade.hpp"
#include "slpt/checkpoint.hpp"
#include "slpt/config.hpp"
#include "slpt/data.hpp"
#include "slpt/errors.hpp"
#include "slpt/geometry.hpp"
#include "slpt/metrics.hpp"
#include "slpt/model.hpp"
#include "slpt/tensor.hpp"
#include "slpt/run.hpp"
#include "slpt/train.hpp"
