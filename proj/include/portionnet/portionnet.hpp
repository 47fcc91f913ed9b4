#pragma once

// Umbrella header.

#include "portionnet/adapter.hpp"
#include "portionnet/checkpoint.hpp"
#include "portionnet/config.hpp"
#include "portionnet/data_model.hpp"
#include "portionnet/dataset_io.hpp"
#include "portionnet/digest.hpp"
#include "portionnet/encoders.hpp"
#include "portionnet/evaluation.hpp"
#include "portionnet/fusion_heads.hpp"
#include "portionnet/gradcheck.hpp"
#include "portionnet/layers.hpp"
#include "portionnet/losscheck.hpp"
#include "portionnet/losses.hpp"
#include "portionnet/model.hpp"
#include "portionnet/optim.hpp"
#include "portionnet/serialize.hpp"
#include "portionnet/tensor.hpp"
#include "portionnet/training.hpp"
