// JSON (de)serialization of run configurations. Readers reject unknown keys
// and fill missing ones with defaults.

#pragma once

#include <nlohmann/json.hpp>

#include "kidnet/ablation.hpp"
#include "kidnet/network.hpp"
#include "kidnet/phantom.hpp"
#include "kidnet/trainer.hpp"

namespace kidnet {

nlohmann::json to_json(const NetworkConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const PhantomSpec& s);
nlohmann::json to_json(const AblationConfig& c);

NetworkConfig network_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);
AblationConfig ablation_config_from_json(const nlohmann::json& j);

}  // namespace kidnet
