#pragma once

#include "cflsim/attack.hpp"
#include "cflsim/config.hpp"
#include "cflsim/data.hpp"
#include "cflsim/errors.hpp"
#include "cflsim/federation.hpp"
#include "cflsim/metrics.hpp"
#include "cflsim/model.hpp"
#include "cflsim/random.hpp"
#include "cflsim/runner.hpp"
