#pragma once

#include "gradflow/analysis.hpp"
#include "gradflow/architecture.hpp"
#include "gradflow/config.hpp"
#include "gradflow/eci.hpp"
#include "gradflow/error.hpp"
#include "gradflow/experiment.hpp"
#include "gradflow/flows.hpp"
#include "gradflow/hilbert.hpp"
#include "gradflow/io.hpp"
#include "gradflow/parametric.hpp"
#include "gradflow/problem.hpp"
#include "gradflow/pruning.hpp"
#include "gradflow/trace.hpp"
