// Umbrella header.
#pragma once

#include "graftmt/adapters.hpp"
#include "graftmt/checkpoint.hpp"
#include "graftmt/config.hpp"
#include "graftmt/data/bpe.hpp"
#include "graftmt/data/corpus.hpp"
#include "graftmt/data/noise.hpp"
#include "graftmt/data/synthetic.hpp"
#include "graftmt/data/text.hpp"
#include "graftmt/data/vocab.hpp"
#include "graftmt/errors.hpp"
#include "graftmt/eval/beam.hpp"
#include "graftmt/eval/bleu.hpp"
#include "graftmt/freeze.hpp"
#include "graftmt/input_module.hpp"
#include "graftmt/layers.hpp"
#include "graftmt/loss.hpp"
#include "graftmt/model.hpp"
#include "graftmt/ops.hpp"
#include "graftmt/optimizer.hpp"
#include "graftmt/param_tree.hpp"
#include "graftmt/pipeline.hpp"
#include "graftmt/rng.hpp"
#include "graftmt/tensor.hpp"
#include "graftmt/train.hpp"
