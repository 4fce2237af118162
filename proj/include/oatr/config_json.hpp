#pragma once

// JSON forms of the configuration structs. Reading is a partial update:
// keys present in the object overwrite fields, absent keys keep their
// current value, unknown keys throw ConfigError.

#include <json.hpp>

#include "oatr/encoders.hpp"
#include "oatr/object_pipeline.hpp"
#include "oatr/synthetic.hpp"
#include "oatr/trainer.hpp"

namespace oatr {

nlohmann::json to_json(const EncoderConfig& c);
nlohmann::json to_json(const ObjectConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SynthConfig& c);

void update_from_json(EncoderConfig& c, const nlohmann::json& j);
void update_from_json(ObjectConfig& c, const nlohmann::json& j);
void update_from_json(TrainConfig& c, const nlohmann::json& j);
void update_from_json(SynthConfig& c, const nlohmann::json& j);

}  // namespace oatr
