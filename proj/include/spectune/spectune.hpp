#pragma once

// Umbrella header: spectral-domain adapter tuning for point-cloud
// transformers, from geometry up to the experiment harness.

#include "spectune/activations.hpp"
#include "spectune/adapter.hpp"
#include "spectune/backbone.hpp"
#include "spectune/checkpoint.hpp"
#include "spectune/config.hpp"
#include "spectune/dataset.hpp"
#include "spectune/eigensolver.hpp"
#include "spectune/error.hpp"
#include "spectune/graph.hpp"
#include "spectune/matrix.hpp"
#include "spectune/ordering.hpp"
#include "spectune/parallel.hpp"
#include "spectune/pointcloud.hpp"
#include "spectune/selfcheck.hpp"
#include "spectune/spectral.hpp"
#include "spectune/train.hpp"
