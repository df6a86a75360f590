#pragma once

// Umbrella header.
#include "espt/tensor.hpp"
#include "espt/autograd.hpp"
#include "espt/linalg.hpp"
#include "espt/nn_ops.hpp"
#include "espt/transforms.hpp"
#include "espt/backbone.hpp"
#include "espt/episodes.hpp"
#include "espt/espt_loss.hpp"
#include "espt/optimizer.hpp"
#include "espt/evaluation.hpp"
#include "espt/training.hpp"
#include "espt/gradcheck.hpp"
#include "espt/ablation.hpp"
#include "espt/config.hpp"
