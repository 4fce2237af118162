#include "oatr/config_json.hpp"

#include <set>
#include <string>

#include "oatr/errors.hpp"

namespace oatr {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& field, const char* what) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(what) + ": bad value for '" + key + "': " + j.at(key).dump());
  }
}

}  // namespace

json to_json(const EncoderConfig& c) {
  return {{"embed_dim", c.embed_dim},   {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio},
          {"patch_size", c.patch_size}, {"image_size", c.image_size},
          {"max_frames", c.max_frames}, {"max_text_tokens", c.max_text_tokens},
          {"shared_embed_dim", c.shared_embed_dim}, {"channels", c.channels}};
}

void update_from_json(EncoderConfig& c, const json& j) {
  const char* what = "encoder config";
  reject_unknown(j, {"embed_dim", "num_layers", "num_heads", "mlp_ratio", "patch_size", "image_size",
                     "max_frames", "max_text_tokens", "shared_embed_dim", "channels"},
                 what);
  read(j, "embed_dim", c.embed_dim, what);
  read(j, "num_layers", c.num_layers, what);
  read(j, "num_heads", c.num_heads, what);
  read(j, "mlp_ratio", c.mlp_ratio, what);
  read(j, "patch_size", c.patch_size, what);
  read(j, "image_size", c.image_size, what);
  read(j, "max_frames", c.max_frames, what);
  read(j, "max_text_tokens", c.max_text_tokens, what);
  read(j, "shared_embed_dim", c.shared_embed_dim, what);
  read(j, "channels", c.channels, what);
}

json to_json(const ObjectConfig& c) {
  return {{"top_n", c.top_n},
          {"drop_prob", c.drop_prob},
          {"shift_prob", c.shift_prob},
          {"extra_mask_prob", c.extra_mask_prob},
          {"large_box_area_frac", c.large_box_area_frac},
          {"crop_fallback_keep_frac", c.crop_fallback_keep_frac}};
}

void update_from_json(ObjectConfig& c, const json& j) {
  const char* what = "object config";
  reject_unknown(j, {"top_n", "drop_prob", "shift_prob", "extra_mask_prob", "large_box_area_frac",
                     "crop_fallback_keep_frac"},
                 what);
  read(j, "top_n", c.top_n, what);
  read(j, "drop_prob", c.drop_prob, what);
  read(j, "shift_prob", c.shift_prob, what);
  read(j, "extra_mask_prob", c.extra_mask_prob, what);
  read(j, "large_box_area_frac", c.large_box_area_frac, what);
  read(j, "crop_fallback_keep_frac", c.crop_fallback_keep_frac, what);
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"temperature", c.temperature},
          {"lambda", c.lambda},
          {"use_tag_loss", c.use_tag_loss},
          {"use_mask_loss", c.use_mask_loss},
          {"tag_strategy", std::string(to_string(c.tag_strategy))},
          {"visual_input", std::string(to_string(c.visual_input))},
          {"frames_per_clip", c.frames_per_clip},
          {"objects", to_json(c.objects)},
          {"seed", c.seed}};
}

void update_from_json(TrainConfig& c, const json& j) {
  const char* what = "train config";
  reject_unknown(j, {"epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "warmup_steps", "temperature",
                     "lambda", "use_tag_loss", "use_mask_loss", "tag_strategy", "visual_input",
                     "frames_per_clip", "objects", "seed"},
                 what);
  read(j, "epochs", c.epochs, what);
  read(j, "batch_size", c.batch_size, what);
  read(j, "lr_max", c.lr_max, what);
  read(j, "lr_min", c.lr_min, what);
  read(j, "weight_decay", c.weight_decay, what);
  read(j, "warmup_steps", c.warmup_steps, what);
  read(j, "temperature", c.temperature, what);
  read(j, "lambda", c.lambda, what);
  read(j, "use_tag_loss", c.use_tag_loss, what);
  read(j, "use_mask_loss", c.use_mask_loss, what);
  std::string name;
  if (j.contains("tag_strategy")) {
    read(j, "tag_strategy", name, what);
    c.tag_strategy = parse_tag_strategy(name);
  }
  if (j.contains("visual_input")) {
    read(j, "visual_input", name, what);
    c.visual_input = parse_visual_input(name);
  }
  read(j, "frames_per_clip", c.frames_per_clip, what);
  if (j.contains("objects")) update_from_json(c.objects, j.at("objects"));
  read(j, "seed", c.seed, what);
}

json to_json(const SynthConfig& c) {
  return {{"num_samples", c.num_samples}, {"num_object_classes", c.num_object_classes},
          {"image_size", c.image_size},   {"num_frames", c.num_frames},
          {"min_objects", c.min_objects}, {"max_objects", c.max_objects},
          {"seed", c.seed}};
}

void update_from_json(SynthConfig& c, const json& j) {
  const char* what = "synthetic config";
  reject_unknown(j, {"num_samples", "num_object_classes", "image_size", "num_frames", "min_objects",
                     "max_objects", "seed"},
                 what);
  read(j, "num_samples", c.num_samples, what);
  read(j, "num_object_classes", c.num_object_classes, what);
  read(j, "image_size", c.image_size, what);
  read(j, "num_frames", c.num_frames, what);
  read(j, "min_objects", c.min_objects, what);
  read(j, "max_objects", c.max_objects, what);
  read(j, "seed", c.seed, what);
}

}  // namespace oatr
