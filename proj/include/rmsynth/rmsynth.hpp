#pragma once

// Umbrella header.

#include "rmsynth/adam.hpp"
#include "rmsynth/commands.hpp"
#include "rmsynth/loss.hpp"
#include "rmsynth/metrics.hpp"
#include "rmsynth/nn/checkpoint.hpp"
#include "rmsynth/nn/conv.hpp"
#include "rmsynth/nn/networks.hpp"
#include "rmsynth/nn/ops.hpp"
#include "rmsynth/nn/tensor.hpp"
#include "rmsynth/phantom.hpp"
#include "rmsynth/train.hpp"
#include "rmsynth/volf.hpp"
#include "rmsynth/volume.hpp"
#include "rmsynth/warp.hpp"
