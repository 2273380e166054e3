#pragma once

#include "siamav/config.hpp"
#include "siamav/data.hpp"
#include "siamav/embed.hpp"
#include "siamav/error.hpp"
#include "siamav/eval.hpp"
#include "siamav/gradcheck.hpp"
#include "siamav/io.hpp"
#include "siamav/loss.hpp"
#include "siamav/mask.hpp"
#include "siamav/model.hpp"
#include "siamav/nn.hpp"
#include "siamav/ops.hpp"
#include "siamav/optim.hpp"
#include "siamav/rng.hpp"
#include "siamav/tensor.hpp"
#include "siamav/train.hpp"
