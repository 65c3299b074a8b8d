#pragma once

#include "drs/admm.hpp"
#include "drs/baselines.hpp"
#include "drs/bench.hpp"
#include "drs/block_tridiagonal.hpp"
#include "drs/coordinate.hpp"
#include "drs/error.hpp"
#include "drs/fixed_lag.hpp"
#include "drs/format.hpp"
#include "drs/io.hpp"
#include "drs/kalman.hpp"
#include "drs/lambda_select.hpp"
#include "drs/model.hpp"
#include "drs/refine.hpp"
