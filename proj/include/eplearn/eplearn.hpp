#pragma once

#include "eplearn/error.hpp"
#include "eplearn/dataset.hpp"
#include "eplearn/risk_spec.hpp"
#include "eplearn/linear_models.hpp"
#include "eplearn/boosting.hpp"
#include "eplearn/learners.hpp"
#include "eplearn/basis.hpp"
#include "eplearn/crossfit.hpp"
#include "eplearn/sieve.hpp"
#include "eplearn/risk.hpp"
#include "eplearn/metalearners.hpp"
#include "eplearn/simulation.hpp"
#include "eplearn/benchmark.hpp"
#include "eplearn/serialize.hpp"
