#pragma once

#include <json.hpp>

#include "ff/engine.hpp"
#include "ff/goodness.hpp"

namespace ff {

nlohmann::json to_json(const GoodnessParams& params);
nlohmann::json to_json(const FFConfig& cfg);

// Applies the keys present in `j` on top of `base`. Unknown keys and wrongly
// typed values throw std::invalid_argument naming the key.
GoodnessParams goodness_params_from_json(const nlohmann::json& j, GoodnessParams base = {});
FFConfig ff_config_from_json(const nlohmann::json& j, FFConfig base = {});

}  // namespace ff
