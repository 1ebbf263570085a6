#pragma once

// Umbrella header.

#include "riim/assignment_prob.hpp"
#include "riim/ate.hpp"
#include "riim/csv.hpp"
#include "riim/errors.hpp"
#include "riim/iv.hpp"
#include "riim/matched_design.hpp"
#include "riim/matching.hpp"
#include "riim/numeric.hpp"
#include "riim/propensity.hpp"
#include "riim/rng.hpp"
#include "riim/simulation.hpp"
