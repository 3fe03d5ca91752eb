#pragma once

// Umbrella header.

#include "warp_lca/conv.hpp"
#include "warp_lca/dictionary.hpp"
#include "warp_lca/errors.hpp"
#include "warp_lca/lca.hpp"
#include "warp_lca/metrics.hpp"
#include "warp_lca/normalization.hpp"
#include "warp_lca/pipeline.hpp"
#include "warp_lca/predictor.hpp"
#include "warp_lca/storage.hpp"
#include "warp_lca/tensor.hpp"
#include "warp_lca/thresholds.hpp"
