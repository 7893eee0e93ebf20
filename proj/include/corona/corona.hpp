#pragma once

// Umbrella header: the whole library.
#include "corona/common.hpp"
#include "corona/evaluate.hpp"
#include "corona/features.hpp"
#include "corona/gnn.hpp"
#include "corona/graph.hpp"
#include "corona/llm.hpp"
#include "corona/metrics.hpp"
#include "corona/optim.hpp"
#include "corona/pipeline.hpp"
#include "corona/prompts.hpp"
#include "corona/retrieval.hpp"
#include "corona/synthetic.hpp"
