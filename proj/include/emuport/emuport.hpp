#pragma once

// Umbrella header for the whole library.

#include "emuport/error.hpp"
#include "emuport/linalg.hpp"
#include "emuport/random.hpp"
#include "emuport/ffbs.hpp"
#include "emuport/loss.hpp"
#include "emuport/baselines.hpp"
#include "emuport/laplace_em.hpp"
#include "emuport/mixture.hpp"
#include "emuport/mcmc.hpp"
#include "emuport/ddnm.hpp"
#include "emuport/backtest.hpp"
#include "emuport/io.hpp"
