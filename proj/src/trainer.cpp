#include "oatr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "oatr/checkpoint.hpp"
#include "oatr/config_json.hpp"
#include "oatr/errors.hpp"

namespace oatr {

using json = nlohmann::json;
namespace fs = std::filesystem;

VisualInput parse_visual_input(std::string_view name) {
  if (name == "raw") return VisualInput::raw;
  if (name == "mask") return VisualInput::mask;
  if (name == "joint") return VisualInput::joint;
  throw ConfigError("unknown visual input '" + std::string(name) + "' (expected raw, mask, joint)");
}

std::string_view to_string(VisualInput v) {
  switch (v) {
    case VisualInput::raw: return "raw";
    case VisualInput::mask: return "mask";
    case VisualInput::joint: return "joint";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (!(lr_min > 0) || !(lr_max >= lr_min)) throw ConfigError("train: need lr_max >= lr_min > 0");
  if (!(weight_decay >= 0)) throw ConfigError("train: weight_decay must be >= 0");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (frames_per_clip < 1) throw ConfigError("train: frames_per_clip must be >= 1");
  loss_config().validate();
  objects.validate();
  if (visual_input == VisualInput::raw && use_mask_loss) {
    throw ConfigError("train: the mask loss needs the masked anchor stream (visual input mask or joint)");
  }
}

bool TrainConfig::needs_anchor() const {
  return visual_input == VisualInput::mask || (visual_input == VisualInput::joint && use_mask_loss);
}

bool TrainConfig::needs_tag_stream() const { return use_tag_loss && tag_strategy != TagStrategy::padding; }

bool TrainConfig::pads_caption() const { return use_tag_loss && tag_strategy == TagStrategy::padding; }

bool TrainConfig::needs_object_pipeline() const { return needs_anchor() || use_tag_loss; }

LossConfig TrainConfig::loss_config() const {
  LossConfig c;
  c.temperature = temperature;
  c.lambda = lambda;
  c.use_tag_loss = needs_tag_stream();
  c.use_mask_loss = visual_input == VisualInput::joint && use_mask_loss;
  return c;
}

void apply_ablation(TrainConfig& config, std::string_view name) {
  if (name == "baseline") {
    config.use_tag_loss = false;
    config.use_mask_loss = false;
    config.visual_input = VisualInput::raw;
  } else if (name == "tag") {
    config.use_tag_loss = true;
    config.use_mask_loss = false;
    config.visual_input = VisualInput::raw;
  } else if (name == "mask") {
    config.use_tag_loss = false;
    config.use_mask_loss = true;
    config.visual_input = VisualInput::joint;
  } else if (name == "full") {
    config.use_tag_loss = true;
    config.use_mask_loss = true;
    config.visual_input = VisualInput::joint;
  } else {
    throw ConfigError("unknown ablation '" + std::string(name) + "' (expected baseline, tag, mask, full)");
  }
}

double lr_at_step(long step, long total_steps, double lr_max, double lr_min) {
  if (total_steps <= 0) throw InputError("lr_at_step: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw InputError("lr_at_step: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

double scheduled_lr(const TrainConfig& config, long step, long total_steps) {
  double lr = lr_at_step(step, total_steps, config.lr_max, config.lr_min);
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  return lr;
}

void adam_step(std::span<NamedParameter<float>> params, AdamState& state, double lr, const AdamConfig& config) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix<float>::Zero(p.tensor.rows(), p.tensor.cols()));
      state.v.push_back(Matrix<float>::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");
  std::vector<Matrix<float>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    grads.push_back(p.tensor.grad());
    if (!grads.back().allFinite()) throw NumericError("adam_step: non-finite gradient in parameter " + p.name);
  }
  ++state.step;
  const auto b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
  const auto c1 = static_cast<float>(1.0 - std::pow(config.beta1, static_cast<double>(state.step)));
  const auto c2 = static_cast<float>(1.0 - std::pow(config.beta2, static_cast<double>(state.step)));
  const auto decay = static_cast<float>(1.0 - lr * config.weight_decay);
  const auto rate = static_cast<float>(lr);
  const auto eps = static_cast<float>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor.mutable_value();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    if (config.weight_decay != 0) w *= decay;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    w.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

TextContext make_text_context(const Vocabulary& vocab, const TagVocabulary& tags, int max_text_tokens) {
  TextContext t;
  t.vocab = &vocab;
  t.tag_ids = tag_token_ids(tags, vocab);
  t.max_text_tokens = max_text_tokens;
  return t;
}

PreparedSample prepare_sample(const VideoSample& sample, const TrainConfig& config, const TextContext& text,
                              int patch_size, Rng& rng) {
  if (sample.captions.empty()) throw InputError("sample " + sample.video_id + " has no caption");
  PreparedSample out;
  SamplerConfig sampler;
  sampler.frames_per_clip = config.frames_per_clip;
  out.clip = sample_frames(sample, sampler);
  const auto& caption = sample.captions[rng.uniform_int(sample.captions.size())];
  const auto max_len = static_cast<std::size_t>(text.max_text_tokens);
  out.caption = tokenize(caption, *text.vocab, max_len);
  if (!config.needs_object_pipeline()) return out;

  const auto available = sample.annotated_frames();
  std::vector<ObjectAnnotation> kept;
  int anchor_frame = out.clip.indices[out.clip.indices.size() / 2];
  if (!available.empty()) {
    anchor_frame = select_anchor_frame(out.clip.indices, available, config.objects, rng);
    kept = select_objects(sample.objects_on(anchor_frame), config.objects, rng);
  }
  if (config.needs_anchor()) {
    const Image& frame = sample.frames.at(static_cast<std::size_t>(anchor_frame));
    MaskedAnchorFrame anchor;
    anchor.pixels = frame;
    anchor.keep_grid = build_patch_mask(kept, frame.height, frame.width, patch_size, config.objects, rng);
    anchor.anchor_frame_index = anchor_frame;
    anchor.kept_objects = kept;
    out.anchor = std::move(anchor);
    // Temporal position: the clip slot closest to the anchor frame.
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.clip.indices.size(); ++i) {
      if (std::abs(out.clip.indices[i] - anchor_frame) < std::abs(out.clip.indices[best] - anchor_frame)) best = i;
    }
    out.anchor_temporal_index = static_cast<int>(best);
  }
  if (config.use_tag_loss) {
    auto streams = build_tag_stream(kept, config.tag_strategy, out.caption, text.tag_ids, max_len);
    out.caption = std::move(streams.caption);
    if (config.needs_tag_stream()) out.tags = std::move(streams.tags);
  }
  return out;
}

LossTerms<float> compute_losses(std::span<const PreparedSample> batch, const DualEncoder<float>& model,
                                const TrainConfig& config, StreamBatch<float>* streams) {
  std::vector<std::vector<TokenId>> captions, tags;
  std::vector<ClipInput> clips;
  std::vector<AnchorInput> anchors;
  for (const auto& s : batch) {
    captions.push_back(s.caption);
    clips.push_back({s.clip.frames});
    if (config.needs_anchor()) {
      if (!s.anchor) throw ContractError("compute_losses: sample prepared without an anchor");
      anchors.push_back({&s.anchor->pixels, s.anchor->keep_grid, s.anchor_temporal_index});
    }
    if (config.needs_tag_stream()) {
      if (!s.tags) throw ContractError("compute_losses: sample prepared without a tag stream");
      tags.push_back(*s.tags);
    }
  }
  StreamBatch<float> b;
  b.t = model.encode_text(captions);
  Tensor<float> anchor_embedding;
  if (config.needs_anchor()) anchor_embedding = model.encode_masked_anchor(anchors);
  if (config.visual_input == VisualInput::mask) {
    b.v = anchor_embedding;
  } else {
    b.v = model.encode_video(clips);
    if (config.needs_anchor()) b.v_l = anchor_embedding;
  }
  if (config.needs_tag_stream()) b.t_l = model.encode_tags(tags);
  auto terms = total_loss(b, config.loss_config());
  if (streams) *streams = b;
  return terms;
}

StepLosses train_step(std::span<const PreparedSample> batch, DualEncoder<float>& model, AdamState& adam,
                      const TrainConfig& config, double lr) {
  if (batch.size() < 2) throw InputError("train_step: batch needs at least 2 samples");
  model.zero_grad();
  auto terms = compute_losses(batch, model, config);
  StepLosses out;
  out.total = terms.total.item();
  out.matching = terms.matching.item();
  if (terms.tag.defined()) out.tag = terms.tag.item();
  if (terms.mask.defined()) out.mask = terms.mask.item();
  if (!std::isfinite(out.total)) throw NumericError("train_step: non-finite loss " + std::to_string(out.total));
  terms.total.backward();
  AdamConfig opt;
  opt.weight_decay = config.weight_decay;
  adam_step(model.parameters().entries(), adam, lr, opt);
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, long epoch, std::size_t index) {
  return Rng::derive(seed, {0x5a, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(index)});
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, long epoch, std::size_t count) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, {0xe0, static_cast<std::uint64_t>(epoch)}));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

TrainingData load_training_data(const fs::path& manifest, const fs::path& vocab, const fs::path& tags) {
  TrainingData d;
  d.tags = TagVocabulary::load(tags);
  d.vocab = Vocabulary::load(vocab);
  d.samples = load_manifest(manifest, d.tags);
  return d;
}

namespace {

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p.replace_extension(".json");
  return p;
}

void write_text_atomically(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

json metrics_line(const StepRecord& r) {
  json j{{"step", r.step},
         {"epoch", r.epoch},
         {"lr", r.lr},
         {"loss_total", r.losses.total},
         {"loss_m", r.losses.matching},
         {"loss_tag", nullptr},
         {"loss_mask", nullptr}};
  if (r.losses.tag) j["loss_tag"] = *r.losses.tag;
  if (r.losses.mask) j["loss_mask"] = *r.losses.mask;
  return j;
}

}  // namespace

void save_model(const fs::path& checkpoint, const DualEncoder<float>& model, const TrainConfig& train,
                const Vocabulary& vocab, const TagVocabulary& tags, long step, const AdamState* adam) {
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  auto arrays = model.state();
  if (adam && !adam->m.empty()) {
    const auto& entries = model.parameters().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      arrays.push_back(to_named_array("adam.m." + entries[i].name, Tensor<float>::leaf(entries[i].tensor.shape(), adam->m[i])));
      arrays.push_back(to_named_array("adam.v." + entries[i].name, Tensor<float>::leaf(entries[i].tensor.shape(), adam->v[i])));
    }
  }
  save_checkpoint(checkpoint, arrays);
  json side{{"step", step},
            {"adam_step", adam ? adam->step : 0},
            {"encoder", to_json(model.config())},
            {"train", to_json(train)},
            {"vocab", vocab.words()},
            {"tags", tags.names()}};
  write_text_atomically(sidecar_path(checkpoint), side.dump(2) + "\n");
}

namespace {

struct LoadedState {
  LoadedModel loaded;
  AdamState adam;
};

LoadedState load_state(const fs::path& checkpoint) {
  const json side = read_json_file(sidecar_path(checkpoint));
  LoadedState out;
  auto& m = out.loaded;
  try {
    update_from_json(m.encoder, side.at("encoder"));
    update_from_json(m.train, side.at("train"));
    m.vocab = Vocabulary::from_words(side.at("vocab").get<std::vector<std::string>>());
    m.tags = TagVocabulary(side.at("tags").get<std::vector<std::string>>());
    m.step = side.at("step").get<long>();
    out.adam.step = side.value("adam_step", 0L);
  } catch (const json::exception& e) {
    throw ParseError(sidecar_path(checkpoint).string() + ": " + e.what());
  }
  m.model = DualEncoder<float>(m.encoder, m.vocab.size(), 0);
  const auto arrays = load_checkpoint(checkpoint);
  m.model.load_state(arrays);
  if (out.adam.step > 0) {
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (const auto& p : m.model.parameters().entries()) {
      auto tm = Tensor<float>::zeros(p.tensor.shape()), tv = Tensor<float>::zeros(p.tensor.shape());
      auto im = by_name.find("adam.m." + p.name), iv = by_name.find("adam.v." + p.name);
      if (im == by_name.end() || iv == by_name.end()) {
        throw ParseError(checkpoint.string() + ": missing optimizer state for " + p.name);
      }
      assign_from(tm, *im->second);
      assign_from(tv, *iv->second);
      out.adam.m.push_back(tm.value());
      out.adam.v.push_back(tv.value());
    }
  }
  return out;
}

}  // namespace

LoadedModel load_model(const fs::path& checkpoint) { return load_state(checkpoint).loaded; }

PretrainResult run_pretrain(const PretrainOptions& options, const TrainingData& data) {
  const auto& cfg = options.train;
  cfg.validate();
  options.encoder.validate();
  if (cfg.frames_per_clip > options.encoder.max_frames) {
    throw ConfigError("train: frames_per_clip " + std::to_string(cfg.frames_per_clip) + " exceeds max_frames " +
                      std::to_string(options.encoder.max_frames));
  }
  const auto k = static_cast<std::size_t>(cfg.batch_size);
  if (data.samples.size() < k) {
    throw InputError("pretrain: " + std::to_string(data.samples.size()) + " samples, fewer than one batch of " +
                     std::to_string(k));
  }
  const long steps_per_epoch = static_cast<long>(data.samples.size() / k);
  const long total = steps_per_epoch * cfg.epochs;
  const long limit = options.max_steps >= 0 ? std::min(total, options.max_steps) : total;
  const TextContext text = make_text_context(data.vocab, data.tags, options.encoder.max_text_tokens);

  const fs::path ckpt = options.out_dir / "last.oatr";
  const fs::path metrics = options.out_dir / "metrics.jsonl";
  fs::create_directories(options.out_dir);

  DualEncoder<float> model(options.encoder, data.vocab.size(), Rng::derive(cfg.seed, {0x1d}));
  AdamState adam;
  long step = 0;
  if (options.resume) {
    auto state = load_state(ckpt);
    if (to_json(state.loaded.train) != to_json(cfg) || to_json(state.loaded.encoder) != to_json(options.encoder)) {
      throw ConfigError("resume: configuration differs from the one stored in " + ckpt.string());
    }
    if (state.loaded.vocab.words() != data.vocab.words()) throw ConfigError("resume: vocabulary differs from the checkpoint");
    model = std::move(state.loaded.model);
    adam = std::move(state.adam);
    step = state.loaded.step;
  }

  // Keep the log consistent with the checkpoint: one line per completed step.
  std::vector<std::string> kept_lines;
  if (options.resume) {
    std::ifstream is(metrics);
    std::string line;
    while (static_cast<long>(kept_lines.size()) < step && std::getline(is, line)) kept_lines.push_back(line);
  }
  std::ofstream log(metrics, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open " + metrics.string() + " for writing");
  for (const auto& l : kept_lines) log << l << '\n';

  model.set_requires_grad(true);
  PretrainResult result;
  result.total_steps = total;
  result.checkpoint = ckpt;
  long cached_epoch = -1;
  std::vector<std::size_t> order;
  while (step < limit) {
    const long epoch = step / steps_per_epoch;
    const long within = step % steps_per_epoch;
    if (epoch != cached_epoch) {
      order = epoch_order(cfg.seed, epoch, data.samples.size());
      cached_epoch = epoch;
    }
    std::vector<PreparedSample> batch;
    batch.reserve(k);
    for (std::size_t b = 0; b < k; ++b) {
      const std::size_t idx = order[static_cast<std::size_t>(within) * k + b];
      Rng rng(sample_seed(cfg.seed, epoch, idx));
      batch.push_back(prepare_sample(data.samples[idx], cfg, text, options.encoder.patch_size, rng));
    }
    StepRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    rec.lr = scheduled_lr(cfg, step, total);
    rec.losses = train_step(batch, model, adam, cfg, rec.lr);
    log << metrics_line(rec).dump() << '\n';
    log.flush();
    if (options.on_step) options.on_step(rec);
    result.records.push_back(rec);
    ++step;
    const bool periodic = options.checkpoint_every > 0 ? step % options.checkpoint_every == 0
                                                       : step % steps_per_epoch == 0;
    if (periodic || step == limit) save_model(ckpt, model, cfg, data.vocab, data.tags, step, &adam);
  }
  if (!log) throw std::runtime_error("write failed: " + metrics.string());
  result.steps_done = step;
  return result;
}

}  // namespace oatr
