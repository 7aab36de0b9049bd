#pragma once

#include "nvcam/config_io.hpp"
#include "nvcam/core_model.hpp"
#include "nvcam/detector.hpp"
#include "nvcam/fitters.hpp"
#include "nvcam/frame_store.hpp"
#include "nvcam/lfsr.hpp"
#include "nvcam/optics.hpp"
#include "nvcam/parameter_map.hpp"
#include "nvcam/sequencer.hpp"
#include "nvcam/simulation.hpp"
#include "nvcam/stitch.hpp"
