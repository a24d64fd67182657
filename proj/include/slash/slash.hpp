// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "slash/checkpoint.hpp"
#include "slash/config.hpp"
#include "slash/dataset_io.hpp"
#include "slash/error.hpp"
#include "slash/gradcheck.hpp"
#include "slash/harness.hpp"
#include "slash/hungarian.hpp"
#include "slash/metrics.hpp"
#include "slash/model.hpp"
#include "slash/nn.hpp"
#include "slash/ops.hpp"
#include "slash/png_io.hpp"
#include "slash/run.hpp"
#include "slash/scene.hpp"
#include "slash/tape.hpp"
#include "slash/tensor.hpp"
#include "slash/text.hpp"
#include "slash/training.hpp"
#include "slash/viz.hpp"
