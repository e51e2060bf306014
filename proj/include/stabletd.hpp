#pragma once

#include "stabletd/error.hpp"
#include "stabletd/tensor.hpp"
#include "stabletd/random.hpp"
#include "stabletd/cpd.hpp"
#include "stabletd/spherical_qp.hpp"
#include "stabletd/epc.hpp"
#include "stabletd/tucker2.hpp"
#include "stabletd/hybrid.hpp"
#include "stabletd/conv.hpp"
#include "stabletd/io.hpp"
#include "stabletd/pipeline.hpp"
#include "stabletd/ranksearch.hpp"
