#pragma once

#include "speclab/cache.hpp"
#include "speclab/config.hpp"
#include "speclab/gadgets.hpp"
#include "speclab/isa.hpp"
#include "speclab/layout.hpp"
#include "speclab/mitigations.hpp"
#include "speclab/pipeline.hpp"
#include "speclab/predictors.hpp"
#include "speclab/speconnector.hpp"
