#pragma once

#include "plvl/numerics/gradcheck.hpp"
#include "plvl/numerics/ops.hpp"
#include "plvl/numerics/serialize.hpp"
#include "plvl/numerics/tape.hpp"
#include "plvl/numerics/tensor.hpp"
