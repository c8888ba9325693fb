#pragma once

#include "ndbm2/align.hpp"
#include "ndbm2/analysis.hpp"
#include "ndbm2/error.hpp"
#include "ndbm2/io.hpp"
#include "ndbm2/ndconv.hpp"
#include "ndbm2/parallel.hpp"
#include "ndbm2/pipeline.hpp"
#include "ndbm2/random.hpp"
#include "ndbm2/ssd.hpp"
#include "ndbm2/tensor.hpp"
