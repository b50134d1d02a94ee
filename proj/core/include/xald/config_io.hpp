#pragma once

// JSON views of the config records. Keys are the kebab-case CLI flag names,
// so a --config file and command-line flags describe the same surface.
// merge_* functions only touch fields present in the JSON.

#include <nlohmann/json.hpp>

#include "xald/synth_data.hpp"
#include "xald/trainer.hpp"

namespace xald {

nlohmann::json to_json(const SamplerConfig& cfg);
nlohmann::json to_json(const MixConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const GenerateParams& params);

void merge_config(const nlohmann::json& j, SamplerConfig& cfg);
void merge_config(const nlohmann::json& j, MixConfig& cfg);
void merge_config(const nlohmann::json& j, TrainConfig& cfg);
void merge_config(const nlohmann::json& j, GenerateParams& params);

}  // namespace xald
