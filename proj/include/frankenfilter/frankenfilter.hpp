#pragma once

#include "core.hpp"
#include "filters.hpp"
#include "io.hpp"
#include "mjp.hpp"
#include "models.hpp"
#include "oracle.hpp"
#include "parallel.hpp"
#include "pmmh.hpp"
#include "rng.hpp"
#include "tuning.hpp"
