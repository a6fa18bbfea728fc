#pragma once

#include "lorm/error.hpp"
#include "lorm/rng.hpp"
#include "lorm/linalg.hpp"
#include "lorm/peft.hpp"
#include "lorm/merge.hpp"
#include "lorm/fcil.hpp"
#include "lorm/train.hpp"
#include "lorm/federation.hpp"
#include "lorm/serialize.hpp"
#include "lorm/experiment.hpp"
