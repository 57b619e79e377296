#pragma once

#include <gtest/gtest.h>

#include "sampling.hpp"
