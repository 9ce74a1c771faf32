#pragma once

#include "comalign/components.hpp"
#include "comalign/encoder.hpp"
#include "comalign/error.hpp"
#include "comalign/inference.hpp"
#include "comalign/ingestion/base64.hpp"
#include "comalign/ingestion/batching.hpp"
#include "comalign/ingestion/records.hpp"
#include "comalign/ingestion/synth.hpp"
#include "comalign/matching.hpp"
#include "comalign/numerics/gradcheck.hpp"
#include "comalign/numerics/ops.hpp"
#include "comalign/numerics/tape.hpp"
#include "comalign/numerics/tensor.hpp"
#include "comalign/objective.hpp"
#include "comalign/training.hpp"
