#pragma once

#include "pace/assignment.hpp"
#include "pace/errors.hpp"
#include "pace/inference.hpp"
#include "pace/io.hpp"
#include "pace/learning.hpp"
#include "pace/metrics.hpp"
#include "pace/model.hpp"
#include "pace/numkit.hpp"
#include "pace/parallel.hpp"
#include "pace/synthetic.hpp"
