// Copyright (C) 2026 The IRA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ira/answering.hpp"
#include "ira/dataset.hpp"
#include "ira/error.hpp"
#include "ira/filter.hpp"
#include "ira/gateway.hpp"
#include "ira/http_transport.hpp"
#include "ira/inquiry.hpp"
#include "ira/parallel.hpp"
#include "ira/pipeline.hpp"
#include "ira/prompt.hpp"
#include "ira/refinement.hpp"
#include "ira/util.hpp"
