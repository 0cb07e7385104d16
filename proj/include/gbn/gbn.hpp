#pragma once

#include "gbn/tensor.hpp"
#include "gbn/ops.hpp"
#include "gbn/risk_stats.hpp"
#include "gbn/deviation.hpp"
#include "gbn/gbn_layer.hpp"
#include "gbn/data.hpp"
#include "gbn/nn.hpp"
#include "gbn/experiment.hpp"
