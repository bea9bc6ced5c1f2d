#pragma once

#include "kse/error.hpp"
#include "kse/rng.hpp"
#include "kse/image.hpp"
#include "kse/transform.hpp"
#include "kse/dataset.hpp"
#include "kse/model.hpp"
#include "kse/ensemble.hpp"
#include "kse/pipeline.hpp"
#include "kse/attacks.hpp"
#include "kse/eval.hpp"
#include "kse/experiment.hpp"
