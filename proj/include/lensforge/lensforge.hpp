#pragma once

#include "lensforge/catalog.hpp"
#include "lensforge/cluster.hpp"
#include "lensforge/cosmology.hpp"
#include "lensforge/error.hpp"
#include "lensforge/evaluate.hpp"
#include "lensforge/fft.hpp"
#include "lensforge/grid.hpp"
#include "lensforge/hash.hpp"
#include "lensforge/interp.hpp"
#include "lensforge/io.hpp"
#include "lensforge/lens.hpp"
#include "lensforge/likelihood.hpp"
#include "lensforge/manifest.hpp"
#include "lensforge/mock.hpp"
#include "lensforge/normalize.hpp"
#include "lensforge/observe.hpp"
#include "lensforge/parallel.hpp"
#include "lensforge/random.hpp"
#include "lensforge/raster.hpp"
#include "lensforge/sampler.hpp"
#include "lensforge/score_protocol.hpp"
