#pragma once

#include "binary_io.hpp"
#include "dsp.hpp"
#include "errors.hpp"
#include "gradcheck.hpp"
#include "ingest.hpp"
#include "model.hpp"
#include "ops.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "training.hpp"
#include "windows.hpp"
