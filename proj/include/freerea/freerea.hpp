// Copyright 2026 The freerea Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "freerea/autodiff.hpp"
#include "freerea/benchio.hpp"
#include "freerea/errors.hpp"
#include "freerea/evolve.hpp"
#include "freerea/fitness.hpp"
#include "freerea/gradcheck.hpp"
#include "freerea/metrics.hpp"
#include "freerea/netbuilder.hpp"
#include "freerea/random.hpp"
#include "freerea/report.hpp"
#include "freerea/searchspace.hpp"
