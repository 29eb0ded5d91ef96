#pragma once

#include "leafmask/errors.hpp"
#include "leafmask/tensor.hpp"
#include "leafmask/ops.hpp"
#include "leafmask/init.hpp"
#include "leafmask/attention.hpp"
#include "leafmask/decoder.hpp"
#include "leafmask/assembly.hpp"
#include "leafmask/refine.hpp"
#include "leafmask/losses.hpp"
#include "leafmask/metrics.hpp"
#include "leafmask/synth.hpp"
#include "leafmask/gradcheck.hpp"
#include "leafmask/toy.hpp"
#include "leafmask/io/lmt.hpp"
#include "leafmask/io/box_csv.hpp"
#include "leafmask/io/raster.hpp"
#include "leafmask/io/params.hpp"
