#pragma once

// Everything in one include.

#include "dsgw/cli.hpp"
#include "dsgw/core.hpp"
#include "dsgw/image.hpp"
#include "dsgw/io.hpp"
#include "dsgw/kdtree.hpp"
#include "dsgw/losses.hpp"
#include "dsgw/metrics.hpp"
#include "dsgw/optim.hpp"
#include "dsgw/random.hpp"
#include "dsgw/rasterizer.hpp"
#include "dsgw/scenegen.hpp"
#include "dsgw/segmentation.hpp"
#include "dsgw/statetransfer.hpp"
#include "dsgw/trainer.hpp"
