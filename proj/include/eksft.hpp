#pragma once

#include "eksft/analyze.hpp"
#include "eksft/batch.hpp"
#include "eksft/checkpoint.hpp"
#include "eksft/csv.hpp"
#include "eksft/errors.hpp"
#include "eksft/eval.hpp"
#include "eksft/hash.hpp"
#include "eksft/log.hpp"
#include "eksft/model.hpp"
#include "eksft/numerics.hpp"
#include "eksft/objective.hpp"
#include "eksft/optimizer.hpp"
#include "eksft/rng.hpp"
#include "eksft/selection.hpp"
#include "eksft/tasks.hpp"
#include "eksft/train_rl.hpp"
#include "eksft/train_sft.hpp"
