#pragma once

#include "cfu/conformal.hpp"
#include "cfu/dataset.hpp"
#include "cfu/error.hpp"
#include "cfu/evaluate.hpp"
#include "cfu/metrics.hpp"
#include "cfu/mia.hpp"
#include "cfu/model.hpp"
#include "cfu/pipeline.hpp"
#include "cfu/probability_matrix.hpp"
#include "cfu/report.hpp"
#include "cfu/unlearn.hpp"
