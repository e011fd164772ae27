#pragma once

#include "simdiffrec/augment.hpp"
#include "simdiffrec/autograd.hpp"
#include "simdiffrec/checkpoint.hpp"
#include "simdiffrec/cli.hpp"
#include "simdiffrec/config.hpp"
#include "simdiffrec/contrastive.hpp"
#include "simdiffrec/dataio.hpp"
#include "simdiffrec/diffusion.hpp"
#include "simdiffrec/encoder.hpp"
#include "simdiffrec/errors.hpp"
#include "simdiffrec/evalmetrics.hpp"
#include "simdiffrec/nn.hpp"
#include "simdiffrec/optim.hpp"
#include "simdiffrec/parallel.hpp"
#include "simdiffrec/trainer.hpp"
