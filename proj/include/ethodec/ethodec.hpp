#pragma once

#include "ethodec/checkpoint.hpp"
#include "ethodec/config.hpp"
#include "ethodec/data_io.hpp"
#include "ethodec/decoder.hpp"
#include "ethodec/errors.hpp"
#include "ethodec/features.hpp"
#include "ethodec/layers.hpp"
#include "ethodec/metrics.hpp"
#include "ethodec/optim.hpp"
#include "ethodec/rng.hpp"
#include "ethodec/tensor.hpp"
#include "ethodec/text_model.hpp"
#include "ethodec/trainer.hpp"
