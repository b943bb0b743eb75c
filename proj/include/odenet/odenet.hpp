#pragma once

#include "odenet/tensor.hpp"
#include "odenet/parallel.hpp"
#include "odenet/kernels.hpp"
#include "odenet/autodiff.hpp"
#include "odenet/optim.hpp"
#include "odenet/grad_check.hpp"
#include "odenet/resnet.hpp"
#include "odenet/data.hpp"
#include "odenet/multilevel.hpp"
#include "odenet/lesion.hpp"
#include "odenet/checkpoint.hpp"
#include "odenet/config.hpp"
