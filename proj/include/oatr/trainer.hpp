#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "oatr/data.hpp"
#include "oatr/encoders.hpp"
#include "oatr/losses.hpp"
#include "oatr/object_pipeline.hpp"

namespace oatr {

/// Which visual streams feed the losses: the raw clip only, the masked
/// anchor frame only (it then stands in for v everywhere), or both.
enum class VisualInput { raw, mask, joint };

VisualInput parse_visual_input(std::string_view name);
std::string_view to_string(VisualInput v);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr_max = 3e-4;
  double lr_min = 3e-6;
  double weight_decay = 0.01;
  int warmup_steps = 0;
  double temperature = 0.05;
  double lambda = 0.5;
  bool use_tag_loss = true;
  bool use_mask_loss = true;
  TagStrategy tag_strategy = TagStrategy::two_stream;
  VisualInput visual_input = VisualInput::joint;
  int frames_per_clip = 4;
  ObjectConfig objects;
  std::uint64_t seed = 0;

  void validate() const;

  /// Loss switches after resolving the strategy and input variant: padding
  /// carries tags inside the caption (no tag stream), and with masked-only
  /// input the anchor already replaces v in the matching term.
  LossConfig loss_config() const;
  bool needs_anchor() const;
  bool needs_tag_stream() const;
  /// Tags appended to the caption itself (padding strategy with tags on).
  bool pads_caption() const;
  bool needs_object_pipeline() const;
};

/// Presets: baseline (matching only), tag (+tag loss), mask (+mask loss),
/// full (both). Sets the loss switches and the visual input.
void apply_ablation(TrainConfig& config, std::string_view name);

/// Cosine decay from lr_max at step 0 to lr_min at total_steps.
double lr_at_step(long step, long total_steps, double lr_max, double lr_min);

/// Cosine schedule with an optional linear ramp over the first warmup steps.
double scheduled_lr(const TrainConfig& config, long step, long total_steps);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  long step = 0;
  std::vector<Matrix<float>> m;
  std::vector<Matrix<float>> v;
};

/// One bias-corrected Adam update with decoupled weight decay applied first
/// (param -= lr·wd·param). Parameters without a gradient count as zero
/// gradient. Throws NumericError naming the first non-finite gradient.
void adam_step(std::span<NamedParameter<float>> params, AdamState& state, double lr, const AdamConfig& config);

/// Text-side lookups shared by every step.
struct TextContext {
  const Vocabulary* vocab = nullptr;
  std::vector<std::vector<TokenId>> tag_ids;
  int max_text_tokens = 32;
};

TextContext make_text_context(const Vocabulary& vocab, const TagVocabulary& tags, int max_text_tokens);

/// Everything one sample contributes to a step, built from its own seed.
struct PreparedSample {
  Clip clip;
  std::vector<TokenId> caption;
  std::optional<std::vector<TokenId>> tags;
  std::optional<MaskedAnchorFrame> anchor;
  int anchor_temporal_index = 0;
};

PreparedSample prepare_sample(const VideoSample& sample, const TrainConfig& config, const TextContext& text,
                              int patch_size, Rng& rng);

struct StepLosses {
  double total = 0;
  double matching = 0;
  std::optional<double> tag;
  std::optional<double> mask;
};

/// Encodes the streams the configuration uses and evaluates the objective.
LossTerms<float> compute_losses(std::span<const PreparedSample> batch, const DualEncoder<float>& model,
                                const TrainConfig& config, StreamBatch<float>* streams = nullptr);

/// Forward, backward and one optimizer update.
StepLosses train_step(std::span<const PreparedSample> batch, DualEncoder<float>& model, AdamState& adam,
                      const TrainConfig& config, double lr);

/// Seed of sample `index` in `epoch`; also the seed of its object pipeline.
std::uint64_t sample_seed(std::uint64_t seed, long epoch, std::size_t index);

/// Sample order of `epoch`; incomplete final batches are dropped by callers.
std::vector<std::size_t> epoch_order(std::uint64_t seed, long epoch, std::size_t count);

struct TrainingData {
  std::vector<VideoSample> samples;
  Vocabulary vocab;
  TagVocabulary tags;
};

/// Loads a manifest with vocab.txt and tags.txt from the given paths.
TrainingData load_training_data(const std::filesystem::path& manifest, const std::filesystem::path& vocab,
                                const std::filesystem::path& tags);

struct StepRecord {
  long step = 0;
  long epoch = 0;
  double lr = 0;
  StepLosses losses;
};

struct PretrainOptions {
  TrainConfig train;
  EncoderConfig encoder;
  std::filesystem::path out_dir;
  bool resume = false;
  /// Stop after this many total steps (the schedule still spans all epochs).
  long max_steps = -1;
  /// Checkpoint period in steps; 0 means once per epoch.
  long checkpoint_every = 0;
  std::function<void(const StepRecord&)> on_step;
};

struct PretrainResult {
  long steps_done = 0;
  long total_steps = 0;
  std::vector<StepRecord> records;  // steps run by this call
  std::filesystem::path checkpoint;
};

/// Epoch loop over shuffled full batches. Writes out_dir/last.oatr (weights
/// and optimizer moments), out_dir/last.json (configs, vocabularies, step)
/// and out_dir/metrics.jsonl (one line per step).
PretrainResult run_pretrain(const PretrainOptions& options, const TrainingData& data);

struct LoadedModel {
  DualEncoder<float> model;
  EncoderConfig encoder;
  TrainConfig train;
  Vocabulary vocab;
  TagVocabulary tags;
  long step = 0;
};

/// Reads a checkpoint and its JSON sidecar (same path, .json extension).
LoadedModel load_model(const std::filesystem::path& checkpoint);

/// Writes weights (and optimizer moments when given) plus the sidecar.
void save_model(const std::filesystem::path& checkpoint, const DualEncoder<float>& model,
                const TrainConfig& train, const Vocabulary& vocab, const TagVocabulary& tags, long step,
                const AdamState* adam);

}  // namespace oatr
