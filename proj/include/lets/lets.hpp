#pragma once

#include "lets/error.hpp"
#include "lets/random.hpp"
#include "lets/core.hpp"
#include "lets/models.hpp"
#include "lets/observation.hpp"
#include "lets/transport.hpp"
#include "lets/smoothers.hpp"
#include "lets/localisation.hpp"
#include "lets/metrics.hpp"
#include "lets/assimilation.hpp"
#include "lets/harness.hpp"
