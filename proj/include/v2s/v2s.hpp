#pragma once

// Umbrella header.

#include "v2s/geometry.hpp"
#include "v2s/neuralnet.hpp"
#include "v2s/materials.hpp"
#include "v2s/kinematics.hpp"
#include "v2s/dynamics.hpp"
#include "v2s/identify.hpp"
#include "v2s/gaussians.hpp"
#include "v2s/scene.hpp"
