#pragma once

#include "hikfs/ndgrad/checkpoint.hpp"
#include "hikfs/ndgrad/ops.hpp"
#include "hikfs/ndgrad/optim.hpp"
#include "hikfs/ndgrad/tensor.hpp"
