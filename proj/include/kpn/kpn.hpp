#pragma once

#include "kpn/errors.hpp"
#include "kpn/tensor.hpp"
#include "kpn/ops.hpp"
#include "kpn/optim.hpp"
#include "kpn/arch.hpp"
#include "kpn/network.hpp"
#include "kpn/projection.hpp"
#include "kpn/routes.hpp"
#include "kpn/prune.hpp"
#include "kpn/config.hpp"
#include "kpn/data.hpp"
#include "kpn/trainer.hpp"
#include "kpn/checkpoint.hpp"
#include "kpn/synth.hpp"
