#pragma once

#include "netgpt/error.hpp"
#include "netgpt/rng.hpp"
#include "netgpt/hash.hpp"
#include "netgpt/traffic_model.hpp"
#include "netgpt/encoding.hpp"
#include "netgpt/ingestion.hpp"
#include "netgpt/augmentation.hpp"
#include "netgpt/model.hpp"
#include "netgpt/training.hpp"
#include "netgpt/evaluation.hpp"
#include "netgpt/checkpoint.hpp"

namespace netgpt {
inline constexpr std::string_view kVersion = "0.3.0";
}
