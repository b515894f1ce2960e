// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mam/analysis.hpp"
#include "mam/checkpoint.hpp"
#include "mam/layer_select.hpp"
#include "mam/merge.hpp"
#include "mam/tensor.hpp"
#include "mam/toy/model.hpp"
#include "mam/toy/task.hpp"
#include "mam/toy/train.hpp"
#include "mam/version.hpp"
