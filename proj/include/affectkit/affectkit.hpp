#pragma once

#include "affectkit/checkpoint.hpp"
#include "affectkit/config.hpp"
#include "affectkit/data.hpp"
#include "affectkit/errors.hpp"
#include "affectkit/graph.hpp"
#include "affectkit/model.hpp"
#include "affectkit/objective.hpp"
#include "affectkit/ops.hpp"
#include "affectkit/optim.hpp"
#include "affectkit/parallel.hpp"
#include "affectkit/plot.hpp"
#include "affectkit/postproc.hpp"
#include "affectkit/random.hpp"
#include "affectkit/sequence_batch.hpp"
#include "affectkit/tensor.hpp"
#include "affectkit/trainer.hpp"
