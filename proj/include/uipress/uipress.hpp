#pragma once

#include "uipress/baselines.hpp"
#include "uipress/complexity.hpp"
#include "uipress/compressor.hpp"
#include "uipress/decoder.hpp"
#include "uipress/encoder.hpp"
#include "uipress/errors.hpp"
#include "uipress/harness.hpp"
#include "uipress/instrument.hpp"
#include "uipress/pipeline.hpp"
#include "uipress/serialize.hpp"
#include "uipress/synth.hpp"
#include "uipress/tensor.hpp"
#include "uipress/training.hpp"
#include "uipress/types.hpp"
