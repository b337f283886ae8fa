#pragma once

// Everything except image file I/O (sspf/image_io.hpp, which needs OpenCV).

#include "sspf/autodiff.hpp"
#include "sspf/checkpoint.hpp"
#include "sspf/errors.hpp"
#include "sspf/imagedata.hpp"
#include "sspf/losses.hpp"
#include "sspf/metrics.hpp"
#include "sspf/network.hpp"
#include "sspf/optim.hpp"
#include "sspf/spf.hpp"
#include "sspf/structmap.hpp"
#include "sspf/synthetic.hpp"
#include "sspf/tensor.hpp"
#include "sspf/trainer.hpp"
