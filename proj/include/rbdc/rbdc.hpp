// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "rbdc/autograd.hpp"
#include "rbdc/budget.hpp"
#include "rbdc/checkpoint.hpp"
#include "rbdc/coupling.hpp"
#include "rbdc/data.hpp"
#include "rbdc/errors.hpp"
#include "rbdc/model.hpp"
#include "rbdc/model_spec.hpp"
#include "rbdc/ops.hpp"
#include "rbdc/optim.hpp"
#include "rbdc/protocol.hpp"
#include "rbdc/rng.hpp"
#include "rbdc/tensor.hpp"
#include "rbdc/verify.hpp"
