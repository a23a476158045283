#pragma once

#include "mgml/backbone.hpp"
#include "mgml/checkpoint.hpp"
#include "mgml/consistency.hpp"
#include "mgml/data.hpp"
#include "mgml/distill.hpp"
#include "mgml/experiment.hpp"
#include "mgml/gradcheck.hpp"
#include "mgml/gradsuite.hpp"
#include "mgml/meta_amf.hpp"
#include "mgml/metrics.hpp"
#include "mgml/modality.hpp"
#include "mgml/ops.hpp"
#include "mgml/optim.hpp"
#include "mgml/parallel.hpp"
#include "mgml/params.hpp"
#include "mgml/primitive.hpp"
#include "mgml/random.hpp"
#include "mgml/tensor.hpp"
#include "mgml/train.hpp"
