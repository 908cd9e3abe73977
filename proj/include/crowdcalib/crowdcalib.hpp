#pragma once

#include "crowdcalib/association.hpp"
#include "crowdcalib/bundle_adjust.hpp"
#include "crowdcalib/correspondence.hpp"
#include "crowdcalib/geometry.hpp"
#include "crowdcalib/io.hpp"
#include "crowdcalib/metrics.hpp"
#include "crowdcalib/pipeline.hpp"
#include "crowdcalib/random.hpp"
#include "crowdcalib/ransac.hpp"
#include "crowdcalib/synthetic.hpp"
#include "crowdcalib/types.hpp"
