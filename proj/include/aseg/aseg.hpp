// Umbrella header for the aseg library.

#pragma once

#include "aseg/tensor.hpp"
#include "aseg/checkpoint.hpp"
#include "aseg/graph.hpp"
#include "aseg/blocks.hpp"
#include "aseg/model.hpp"
#include "aseg/metrics.hpp"
#include "aseg/data.hpp"
#include "aseg/training.hpp"
#include "aseg/pruning.hpp"
