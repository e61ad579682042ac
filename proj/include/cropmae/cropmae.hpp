#pragma once

#include "cropmae/autograd.hpp"
#include "cropmae/checkpoint.hpp"
#include "cropmae/config.hpp"
#include "cropmae/error.hpp"
#include "cropmae/gradcheck.hpp"
#include "cropmae/image.hpp"
#include "cropmae/model.hpp"
#include "cropmae/optim.hpp"
#include "cropmae/propeval.hpp"
#include "cropmae/rng.hpp"
#include "cropmae/synth.hpp"
#include "cropmae/tensor.hpp"
#include "cropmae/trainer.hpp"
#include "cropmae/views.hpp"
