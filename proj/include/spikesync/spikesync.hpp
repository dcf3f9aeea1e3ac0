#pragma once

#include "spikesync/bspline.hpp"
#include "spikesync/errors.hpp"
#include "spikesync/evaluate.hpp"
#include "spikesync/inference.hpp"
#include "spikesync/intensity.hpp"
#include "spikesync/io.hpp"
#include "spikesync/ipf.hpp"
#include "spikesync/loglinear.hpp"
#include "spikesync/rng.hpp"
#include "spikesync/simulate.hpp"
#include "spikesync/spikedata.hpp"
#include "spikesync/version.hpp"
