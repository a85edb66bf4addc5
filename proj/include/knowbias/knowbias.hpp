#pragma once

#include "knowbias/attribkit.hpp"
#include "knowbias/autograd.hpp"
#include "knowbias/biasmetrics.hpp"
#include "knowbias/checkpoint.hpp"
#include "knowbias/error.hpp"
#include "knowbias/evaluate.hpp"
#include "knowbias/fixtures.hpp"
#include "knowbias/hash.hpp"
#include "knowbias/lexicon.hpp"
#include "knowbias/model.hpp"
#include "knowbias/neuronselect.hpp"
#include "knowbias/parallel.hpp"
#include "knowbias/pipeline.hpp"
#include "knowbias/planted.hpp"
#include "knowbias/probekit.hpp"
#include "knowbias/steer.hpp"
#include "knowbias/tensor.hpp"
#include "knowbias/trainer.hpp"
#include "knowbias/vocab.hpp"
