#pragma once

#include <semnoma/channel.hpp>
#include <semnoma/checkpoint.hpp>
#include <semnoma/data.hpp>
#include <semnoma/diffusion.hpp>
#include <semnoma/distill.hpp>
#include <semnoma/error.hpp>
#include <semnoma/experiment.hpp>
#include <semnoma/metrics.hpp>
#include <semnoma/model.hpp>
#include <semnoma/rng.hpp>
