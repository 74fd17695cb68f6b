#pragma once

#include "ctrlr/analysis.hpp"
#include "ctrlr/error.hpp"
#include "ctrlr/guidance.hpp"
#include "ctrlr/hmm.hpp"
#include "ctrlr/io.hpp"
#include "ctrlr/lexicon.hpp"
#include "ctrlr/logmath.hpp"
#include "ctrlr/optimizer.hpp"
#include "ctrlr/oracle.hpp"
#include "ctrlr/pipeline.hpp"
#include "ctrlr/policy.hpp"
#include "ctrlr/random.hpp"
#include "ctrlr/rollout.hpp"
#include "ctrlr/toyworld.hpp"
