// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "nic/analysis.hpp"
#include "nic/checkpoint.hpp"
#include "nic/data.hpp"
#include "nic/decode.hpp"
#include "nic/error.hpp"
#include "nic/io.hpp"
#include "nic/layers.hpp"
#include "nic/metrics.hpp"
#include "nic/models.hpp"
#include "nic/ops.hpp"
#include "nic/random.hpp"
#include "nic/tensor.hpp"
#include "nic/train.hpp"
