#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "oatr/config_json.hpp"
#include "oatr/errors.hpp"
#include "oatr/eval.hpp"
#include "oatr/grad_suite.hpp"
#include "oatr/object_pipeline.hpp"
#include "oatr/synthetic.hpp"
#include "oatr/trainer.hpp"

using namespace oatr;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
void set_if(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw UsageError("--config: cannot open " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError("--config: " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("--config: " + path + " must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "synth" && key != "encoder" && key != "train" && key != "eval" && key != "probe") {
      throw UsageError("--config: unknown section '" + key + "' (expected synth, encoder, train, eval, probe)");
    }
  }
  return j;
}

int thread_count() {
  const char* env = std::getenv("OATR_THREADS");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const int n = std::stoi(env, &used);
    if (used != std::string(env).size() || n < 1) throw std::invalid_argument(env);
    return n;
  } catch (const std::exception&) {
    throw UsageError(std::string("OATR_THREADS must be a positive integer, got '") + env + "'");
  }
}

void echo_config(const std::string& command, const json& config) {
  std::cout << json{{"command", command}, {"config", config}}.dump() << std::endl;
}

fs::path beside(const fs::path& manifest, const char* name) { return manifest.parent_path() / name; }

// Options shared by every subcommand.
struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--config", c.config, "JSON config; explicit flags take precedence")->check(CLI::ExistingFile);
}

// -- gen-synth -------------------------------------------------------------

struct GenSynthFlags {
  Common common;
  std::string out;
  std::optional<int> samples, classes, image_size, frames, min_objects, max_objects;
};

void gen_synth(const GenSynthFlags& f) {
  const json file = read_config(f.common.config);
  SynthConfig cfg;
  if (file.contains("synth")) update_from_json(cfg, file.at("synth"));
  set_if(f.samples, cfg.num_samples);
  set_if(f.classes, cfg.num_object_classes);
  set_if(f.image_size, cfg.image_size);
  set_if(f.frames, cfg.num_frames);
  set_if(f.min_objects, cfg.min_objects);
  set_if(f.max_objects, cfg.max_objects);
  set_if(f.common.seed, cfg.seed);
  cfg.validate();
  echo_config("gen-synth", {{"synth", to_json(cfg)}, {"out", f.out}});
  const auto corpus = generate_synthetic_corpus(cfg);
  write_corpus(f.out, corpus);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& s : corpus.samples) ++counts[static_cast<int>(split_of(s.video_id))];
  std::cout << "wrote " << corpus.samples.size() << " videos (train " << counts[0] << ", val " << counts[1]
            << ", test " << counts[2] << ") to " << f.out << "\n";
}

// -- pretrain --------------------------------------------------------------

struct EncoderFlags {
  std::optional<int> embed_dim, layers, heads, patch_size, image_size, max_frames, max_text_tokens, shared_dim;

  void add(CLI::App* cmd) {
    cmd->add_option("--embed-dim", embed_dim, "Transformer width");
    cmd->add_option("--layers", layers, "Transformer blocks per tower");
    cmd->add_option("--heads", heads, "Attention heads");
    cmd->add_option("--patch-size", patch_size, "Patch side in pixels");
    cmd->add_option("--image-size", image_size, "Frame side in pixels");
    cmd->add_option("--max-frames", max_frames, "Largest clip length");
    cmd->add_option("--max-text-tokens", max_text_tokens, "Text length including CLS");
    cmd->add_option("--shared-dim", shared_dim, "Joint embedding width");
  }
  void apply(EncoderConfig& c) const {
    set_if(embed_dim, c.embed_dim);
    set_if(layers, c.num_layers);
    set_if(heads, c.num_heads);
    set_if(patch_size, c.patch_size);
    set_if(image_size, c.image_size);
    set_if(max_frames, c.max_frames);
    set_if(max_text_tokens, c.max_text_tokens);
    set_if(shared_dim, c.shared_embed_dim);
  }
};

struct PretrainFlags {
  Common common;
  std::string manifest, vocab, tags, out;
  std::optional<std::string> ablation, tag_strategy, visual_input;
  std::optional<int> epochs, batch_size, frames, warmup, top_n;
  std::optional<double> lr_max, lr_min, weight_decay, lambda, temperature, drop_prob, shift_prob, extra_mask_prob;
  long max_steps = -1;
  long checkpoint_every = 0;
  bool resume = false;
  EncoderFlags encoder;
};

void pretrain(const PretrainFlags& f) {
  const json file = read_config(f.common.config);
  PretrainOptions opt;
  if (file.contains("encoder")) update_from_json(opt.encoder, file.at("encoder"));
  if (file.contains("train")) update_from_json(opt.train, file.at("train"));
  auto& t = opt.train;
  if (f.ablation) apply_ablation(t, *f.ablation);
  if (f.tag_strategy) t.tag_strategy = parse_tag_strategy(*f.tag_strategy);
  if (f.visual_input) t.visual_input = parse_visual_input(*f.visual_input);
  set_if(f.epochs, t.epochs);
  set_if(f.batch_size, t.batch_size);
  set_if(f.frames, t.frames_per_clip);
  set_if(f.warmup, t.warmup_steps);
  set_if(f.lr_max, t.lr_max);
  set_if(f.lr_min, t.lr_min);
  set_if(f.weight_decay, t.weight_decay);
  set_if(f.lambda, t.lambda);
  set_if(f.temperature, t.temperature);
  set_if(f.top_n, t.objects.top_n);
  set_if(f.drop_prob, t.objects.drop_prob);
  set_if(f.shift_prob, t.objects.shift_prob);
  set_if(f.extra_mask_prob, t.objects.extra_mask_prob);
  set_if(f.common.seed, t.seed);
  f.encoder.apply(opt.encoder);
  opt.encoder.validate();
  t.validate();
  opt.out_dir = f.out;
  opt.resume = f.resume;
  opt.max_steps = f.max_steps;
  opt.checkpoint_every = f.checkpoint_every;

  const fs::path manifest = f.manifest;
  const fs::path vocab = f.vocab.empty() ? beside(manifest, "vocab.txt") : fs::path(f.vocab);
  const fs::path tags = f.tags.empty() ? beside(manifest, "tags.txt") : fs::path(f.tags);
  echo_config("pretrain", {{"encoder", to_json(opt.encoder)},
                           {"train", to_json(t)},
                           {"manifest", manifest.string()},
                           {"vocab", vocab.string()},
                           {"tags", tags.string()},
                           {"out", opt.out_dir.string()},
                           {"resume", opt.resume},
                           {"max_steps", opt.max_steps},
                           {"checkpoint_every", opt.checkpoint_every}});
  const auto data = load_training_data(manifest, vocab, tags);

  long epoch = -1, count = 0;
  double sum = 0;
  auto flush = [&] {
    if (count > 0) std::cout << "epoch " << epoch << " steps " << count << " mean loss " << sum / count << "\n";
  };
  opt.on_step = [&](const StepRecord& r) {
    if (r.epoch != epoch) {
      flush();
      epoch = r.epoch;
      count = 0;
      sum = 0;
    }
    sum += r.losses.total;
    ++count;
  };
  const auto result = run_pretrain(opt, data);
  flush();
  std::cout << "completed " << result.steps_done << "/" << result.total_steps << " steps; checkpoint "
            << result.checkpoint.string() << "\n";
}

// -- evaluation ------------------------------------------------------------

struct EvalFlags {
  std::optional<int> frames;
  std::optional<std::size_t> batch_size;
  bool multi_sentence = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--frames", frames, "Frames per clip at evaluation (default 8)");
    cmd->add_option("--eval-batch", batch_size, "Videos encoded per forward pass");
    cmd->add_flag("--multi-sentence", multi_sentence, "Query with all captions of a video joined by [SEP]");
  }
  EvalOptions resolve(const json& file) const {
    EvalOptions o;
    if (file.contains("eval")) {
      const auto& e = file.at("eval");
      for (const auto& [key, value] : e.items()) {
        if (key != "frames_per_clip" && key != "multi_sentence" && key != "batch_size") {
          throw ConfigError("eval config: unknown key '" + key + "'");
        }
      }
      o.frames_per_clip = e.value("frames_per_clip", o.frames_per_clip);
      o.multi_sentence = e.value("multi_sentence", o.multi_sentence);
      o.batch_size = e.value("batch_size", o.batch_size);
    }
    set_if(frames, o.frames_per_clip);
    set_if(batch_size, o.batch_size);
    if (multi_sentence) o.multi_sentence = true;
    o.threads = thread_count();
    return o;
  }
};

json to_json(const EvalOptions& o) {
  return {{"frames_per_clip", o.frames_per_clip}, {"multi_sentence", o.multi_sentence}, {"batch_size", o.batch_size}};
}

std::vector<VideoSample> load_split(const fs::path& manifest, const std::string& tags_flag, const LoadedModel& m) {
  fs::path tags = tags_flag.empty() ? beside(manifest, "tags.txt") : fs::path(tags_flag);
  return load_manifest(manifest, fs::exists(tags) ? TagVocabulary::load(tags) : m.tags);
}

void print_reports(const EvalResult& r, const std::string& json_out) {
  const std::vector<RetrievalReport> reps{r.t2v, r.v2t};
  std::cout << format_reports(reps);
  const json j = json::array({to_json(r.t2v), to_json(r.v2t)});
  std::cout << j.dump() << "\n";
  if (!json_out.empty()) {
    std::ofstream os(json_out);
    if (!os) throw std::runtime_error("cannot open " + json_out + " for writing");
    os << j.dump(2) << "\n";
  }
}

struct EvalZeroShotFlags {
  Common common;
  std::string checkpoint, manifest, tags, json_out;
  EvalFlags eval;
};

void eval_zeroshot(const EvalZeroShotFlags& f) {
  const json file = read_config(f.common.config);
  const auto opts = f.eval.resolve(file);
  echo_config("eval-zeroshot",
              {{"eval", to_json(opts)}, {"checkpoint", f.checkpoint}, {"manifest", f.manifest}});
  const auto m = load_model(f.checkpoint);
  const auto samples = load_split(f.manifest, f.tags, m);
  print_reports(zero_shot_eval(m.model, samples, m.vocab, opts), f.json_out);
}

struct ProbeFlags {
  Common common;
  std::string checkpoint, train_manifest, test_manifest, tags, json_out;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  bool random_init = false;
  EvalFlags eval;
};

void probe(const ProbeFlags& f) {
  const json file = read_config(f.common.config);
  const auto opts = f.eval.resolve(file);
  ProbeConfig cfg;
  if (file.contains("probe")) {
    const auto& p = file.at("probe");
    for (const auto& [key, value] : p.items()) {
      if (key != "epochs" && key != "lr" && key != "batch_size" && key != "temperature" && key != "seed") {
        throw ConfigError("probe config: unknown key '" + key + "'");
      }
    }
    cfg.epochs = p.value("epochs", cfg.epochs);
    cfg.lr = p.value("lr", cfg.lr);
    cfg.batch_size = p.value("batch_size", cfg.batch_size);
    cfg.temperature = p.value("temperature", cfg.temperature);
    cfg.seed = p.value("seed", cfg.seed);
  }
  set_if(f.epochs, cfg.epochs);
  set_if(f.batch_size, cfg.batch_size);
  set_if(f.lr, cfg.lr);
  set_if(f.common.seed, cfg.seed);
  echo_config("linear-probe", {{"probe",
                                {{"epochs", cfg.epochs},
                                 {"lr", cfg.lr},
                                 {"batch_size", cfg.batch_size},
                                 {"temperature", cfg.temperature},
                                 {"seed", cfg.seed}}},
                               {"eval", to_json(opts)},
                               {"checkpoint", f.checkpoint},
                               {"train_manifest", f.train_manifest},
                               {"test_manifest", f.test_manifest},
                               {"random_init", f.random_init}});
  auto m = load_model(f.checkpoint);
  if (f.random_init) m.model = DualEncoder<float>(m.encoder, m.vocab.size(), Rng::derive(cfg.seed, {0x1d}));
  const auto train = load_split(f.train_manifest, f.tags, m);
  const auto test = load_split(f.test_manifest, f.tags, m);
  const auto r = linear_probe(m.model, train, test, m.vocab, cfg, opts);
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    std::cout << "probe epoch " << e << " mean loss " << r.epoch_loss[e] << "\n";
  }
  print_reports(r.test, f.json_out);
}

// -- inspection ------------------------------------------------------------

struct DumpMaskFlags {
  Common common;
  std::string manifest, tags, out;
  std::size_t index = 0;
  int frames = 4;
  int patch_size = 16;
  std::optional<int> top_n;
  std::optional<double> drop_prob, shift_prob, extra_mask_prob;
};

void dump_mask(const DumpMaskFlags& f) {
  const json file = read_config(f.common.config);
  ObjectConfig objects;
  if (file.contains("train") && file.at("train").contains("objects")) {
    update_from_json(objects, file.at("train").at("objects"));
  }
  set_if(f.top_n, objects.top_n);
  set_if(f.drop_prob, objects.drop_prob);
  set_if(f.shift_prob, objects.shift_prob);
  set_if(f.extra_mask_prob, objects.extra_mask_prob);
  objects.validate();
  const std::uint64_t seed = f.common.seed.value_or(0);
  echo_config("dump-mask", {{"objects", to_json(objects)},
                            {"manifest", f.manifest},
                            {"index", f.index},
                            {"frames", f.frames},
                            {"patch_size", f.patch_size},
                            {"seed", seed},
                            {"out", f.out}});
  const fs::path manifest = f.manifest;
  const auto tags = TagVocabulary::load(f.tags.empty() ? beside(manifest, "tags.txt") : fs::path(f.tags));
  const auto samples = load_manifest(manifest, tags);
  if (f.index >= samples.size()) {
    throw UsageError("--index " + std::to_string(f.index) + " outside manifest of " + std::to_string(samples.size()));
  }
  const auto& s = samples[f.index];
  SamplerConfig sampler;
  sampler.frames_per_clip = f.frames;
  const auto clip = sample_frames(s, sampler);
  Rng rng(seed);
  const auto available = s.annotated_frames();
  int anchor = clip.indices[clip.indices.size() / 2];
  std::vector<ObjectAnnotation> kept;
  if (!available.empty()) {
    anchor = select_anchor_frame(clip.indices, available, objects, rng);
    kept = select_objects(s.objects_on(anchor), objects, rng);
  }
  const Image& frame = s.frames.at(static_cast<std::size_t>(anchor));
  const auto grid = build_patch_mask(kept, frame.height, frame.width, f.patch_size, objects, rng);
  write_ppm(f.out, render_masked_frame(frame, grid, f.patch_size));
  json kept_tags = json::array();
  for (const auto& o : kept) kept_tags.push_back(tags.name(o.tag_id));
  std::cout << json{{"video_id", s.video_id},
                    {"anchor_frame", anchor},
                    {"kept_tags", kept_tags},
                    {"kept_patches", grid.count()},
                    {"total_patches", grid.size()}}
                   .dump()
            << "\n";
}

struct DumpAttnFlags {
  Common common;
  std::string checkpoint, manifest, tags, out;
  std::size_t index = 0;
  int token = 1;
  int layer = 1;
  int frames = 8;
};

void dump_attn(const DumpAttnFlags& f) {
  echo_config("dump-attn", {{"checkpoint", f.checkpoint},
                            {"manifest", f.manifest},
                            {"index", f.index},
                            {"token", f.token},
                            {"layer", f.layer},
                            {"frames", f.frames},
                            {"out", f.out}});
  const auto m = load_model(f.checkpoint);
  const auto samples = load_split(f.manifest, f.tags, m);
  if (f.index >= samples.size()) {
    throw UsageError("--index " + std::to_string(f.index) + " outside manifest of " + std::to_string(samples.size()));
  }
  const auto& s = samples[f.index];
  SamplerConfig sampler;
  sampler.frames_per_clip = f.frames;
  const auto clip = sample_frames(s, sampler);
  const auto caption = tokenize(s.captions.at(0), m.vocab, static_cast<std::size_t>(m.encoder.max_text_tokens));
  const ClipInput input{clip.frames};
  const auto weights = attention_map(m.model, input, caption, f.token, f.layer);
  write_ppm(f.out, render_attention(weights, input, m.encoder.patch_size));
  std::cout << json{{"video_id", s.video_id},
                    {"token", m.vocab.word(caption.at(static_cast<std::size_t>(f.token)))},
                    {"frames", weights.rows()},
                    {"patches_per_frame", weights.cols()}}
                   .dump()
            << "\n";
}

struct GradCheckFlags {
  Common common;
  int trials = 20;
  double tolerance = 1e-4;
};

bool grad_check_command(const GradCheckFlags& f) {
  const std::uint64_t seed = f.common.seed.value_or(0);
  echo_config("grad-check", {{"trials", f.trials}, {"tolerance", f.tolerance}, {"seed", seed}});
  auto entries = run_op_grad_suite(f.trials, seed);
  entries.push_back(run_objective_grad_check(seed));
  bool ok = true;
  for (const auto& e : entries) {
    const bool pass = e.max_rel_error < f.tolerance;
    ok = ok && pass;
    std::printf("%-22s %12.3e %9zu  %s\n", e.name.c_str(), e.max_rel_error, e.coordinates, pass ? "ok" : "FAIL");
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-aware dual-encoder video-text pretraining", "oatr"};
  app.require_subcommand(1);

  GenSynthFlags gs;
  auto* c_gen = app.add_subcommand("gen-synth", "Write a synthetic glyph-video corpus");
  add_common(c_gen, gs.common);
  c_gen->add_option("--out", gs.out, "Output directory")->required();
  c_gen->add_option("--samples", gs.samples, "Number of videos");
  c_gen->add_option("--classes", gs.classes, "Number of object classes");
  c_gen->add_option("--image-size", gs.image_size, "Frame side in pixels");
  c_gen->add_option("--frames", gs.frames, "Frames per video");
  c_gen->add_option("--min-objects", gs.min_objects, "Fewest objects per video");
  c_gen->add_option("--max-objects", gs.max_objects, "Most objects per video");

  PretrainFlags pt;
  auto* c_pre = app.add_subcommand("pretrain", "Contrastive pretraining");
  add_common(c_pre, pt.common);
  c_pre->add_option("--manifest", pt.manifest, "Training manifest (JSONL)")->required()->check(CLI::ExistingFile);
  c_pre->add_option("--vocab", pt.vocab, "Word vocabulary (default: vocab.txt beside the manifest)");
  c_pre->add_option("--tags", pt.tags, "Tag vocabulary (default: tags.txt beside the manifest)");
  c_pre->add_option("--out", pt.out, "Run directory")->required();
  c_pre->add_option("--ablation", pt.ablation, "Preset: baseline, tag, mask, full");
  c_pre->add_option("--tag-strategy", pt.tag_strategy, "padding, two-stream, two-stream-padding");
  c_pre->add_option("--visual-input", pt.visual_input, "raw, mask, joint");
  c_pre->add_option("--epochs", pt.epochs, "Training epochs");
  c_pre->add_option("--batch-size", pt.batch_size, "Pairs per step");
  c_pre->add_option("--frames", pt.frames, "Frames per clip");
  c_pre->add_option("--warmup", pt.warmup, "Linear warmup steps");
  c_pre->add_option("--lr-max", pt.lr_max, "Peak learning rate");
  c_pre->add_option("--lr-min", pt.lr_min, "Final learning rate");
  c_pre->add_option("--weight-decay", pt.weight_decay, "Decoupled weight decay");
  c_pre->add_option("--lambda", pt.lambda, "Weight of the object-aware terms");
  c_pre->add_option("--temperature", pt.temperature, "Contrastive temperature");
  c_pre->add_option("--top-n", pt.top_n, "Objects kept per anchor frame");
  c_pre->add_option("--drop-prob", pt.drop_prob, "Per-object drop probability");
  c_pre->add_option("--shift-prob", pt.shift_prob, "Anchor shift probability");
  c_pre->add_option("--extra-mask-prob", pt.extra_mask_prob, "Extra patch masking probability");
  c_pre->add_option("--max-steps", pt.max_steps, "Stop after this many total steps");
  c_pre->add_option("--checkpoint-every", pt.checkpoint_every, "Checkpoint period in steps (0: per epoch)");
  c_pre->add_flag("--resume", pt.resume, "Continue from <out>/last.oatr");
  pt.encoder.add(c_pre);

  EvalZeroShotFlags ez;
  auto* c_eval = app.add_subcommand("eval-zeroshot", "Zero-shot text-video retrieval");
  add_common(c_eval, ez.common);
  c_eval->add_option("--checkpoint", ez.checkpoint, "Model checkpoint (.oatr)")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--manifest", ez.manifest, "Evaluation manifest")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--tags", ez.tags, "Tag vocabulary (default: tags.txt beside the manifest)");
  c_eval->add_option("--json-out", ez.json_out, "Write the reports as JSON");
  ez.eval.add(c_eval);

  ProbeFlags lp;
  auto* c_probe = app.add_subcommand("linear-probe", "Retrain projection heads on frozen encoders");
  add_common(c_probe, lp.common);
  c_probe->add_option("--checkpoint", lp.checkpoint, "Model checkpoint (.oatr)")->required()->check(CLI::ExistingFile);
  c_probe->add_option("--train-manifest", lp.train_manifest, "Probe training split")->required()->check(CLI::ExistingFile);
  c_probe->add_option("--test-manifest", lp.test_manifest, "Probe test split")->required()->check(CLI::ExistingFile);
  c_probe->add_option("--tags", lp.tags, "Tag vocabulary (default: tags.txt beside each manifest)");
  c_probe->add_option("--epochs", lp.epochs, "Probe epochs (default 10)");
  c_probe->add_option("--batch-size", lp.batch_size, "Pairs per probe step");
  c_probe->add_option("--lr", lp.lr, "Probe learning rate (default 1e-3)");
  c_probe->add_option("--json-out", lp.json_out, "Write the reports as JSON");
  c_probe->add_flag("--random-init", lp.random_init, "Probe randomly initialized encoders of the same shape");
  lp.eval.add(c_probe);

  DumpMaskFlags dm;
  auto* c_mask = app.add_subcommand("dump-mask", "Render one masked anchor frame as PPM");
  add_common(c_mask, dm.common);
  c_mask->add_option("--manifest", dm.manifest, "Manifest")->required()->check(CLI::ExistingFile);
  c_mask->add_option("--tags", dm.tags, "Tag vocabulary (default: tags.txt beside the manifest)");
  c_mask->add_option("--index", dm.index, "Sample index in the manifest");
  c_mask->add_option("--frames", dm.frames, "Frames per clip");
  c_mask->add_option("--patch-size", dm.patch_size, "Patch side in pixels");
  c_mask->add_option("--top-n", dm.top_n, "Objects kept");
  c_mask->add_option("--drop-prob", dm.drop_prob, "Per-object drop probability");
  c_mask->add_option("--shift-prob", dm.shift_prob, "Anchor shift probability");
  c_mask->add_option("--extra-mask-prob", dm.extra_mask_prob, "Extra patch masking probability");
  c_mask->add_option("--out", dm.out, "Output PPM")->required();

  DumpAttnFlags da;
  auto* c_attn = app.add_subcommand("dump-attn", "Render text-token attention over video patches as PPM");
  add_common(c_attn, da.common);
  c_attn->add_option("--checkpoint", da.checkpoint, "Model checkpoint (.oatr)")->required()->check(CLI::ExistingFile);
  c_attn->add_option("--manifest", da.manifest, "Manifest")->required()->check(CLI::ExistingFile);
  c_attn->add_option("--tags", da.tags, "Tag vocabulary (default: tags.txt beside the manifest)");
  c_attn->add_option("--index", da.index, "Sample index in the manifest");
  c_attn->add_option("--token", da.token, "Caption token position (0 is CLS)");
  c_attn->add_option("--layer", da.layer, "Blocks applied before reading token states");
  c_attn->add_option("--frames", da.frames, "Frames per clip");
  c_attn->add_option("--out", da.out, "Output PPM")->required();

  GradCheckFlags gc;
  auto* c_grad = app.add_subcommand("grad-check", "Finite-difference checks of ops and the full objective");
  add_common(c_grad, gc.common);
  c_grad->add_option("--trials", gc.trials, "Random shapes per op");
  c_grad->add_option("--tolerance", gc.tolerance, "Largest accepted relative error");

  if (argc < 2) {
    std::cout << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*c_gen) gen_synth(gs);
    if (*c_pre) pretrain(pt);
    if (*c_eval) eval_zeroshot(ez);
    if (*c_probe) probe(lp);
    if (*c_mask) dump_mask(dm);
    if (*c_attn) dump_attn(da);
    if (*c_grad && !grad_check_command(gc)) {
      std::cerr << "error: gradient check failed\n";
      return 2;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
