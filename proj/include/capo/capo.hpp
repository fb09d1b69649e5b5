#pragma once

#include "capo/checkpoint.hpp"
#include "capo/config.hpp"
#include "capo/env.hpp"
#include "capo/errors.hpp"
#include "capo/estimators.hpp"
#include "capo/metrics.hpp"
#include "capo/numerics.hpp"
#include "capo/optimizer.hpp"
#include "capo/oracle.hpp"
#include "capo/policy.hpp"
#include "capo/stepmodel.hpp"
#include "capo/sweep.hpp"
#include "capo/trainer.hpp"
#include "capo/verify.hpp"
