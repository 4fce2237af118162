#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "oatr/config_json.hpp"
#include "oatr/synthetic.hpp"
#include "oatr/trainer.hpp"

using namespace oatr;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.num_layers = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.patch_size = 8;
  c.image_size = 32;
  c.max_frames = 4;
  c.max_text_tokens = 16;
  c.shared_embed_dim = 8;
  return c;
}

TrainingData tiny_data(int n = 16) {
  SynthConfig s;
  s.num_samples = n;
  s.image_size = 32;
  s.num_frames = 4;
  s.num_object_classes = 6;
  s.seed = 3;
  auto corpus = generate_synthetic_corpus(s);
  return {std::move(corpus.samples), std::move(corpus.vocab), std::move(corpus.tags)};
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 4;
  t.frames_per_clip = 2;
  t.lr_max = 1e-3;
  t.lr_min = 1e-5;
  t.seed = 11;
  return t;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("oatr_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<double> totals(const PretrainResult& r) {
  std::vector<double> out;
  for (const auto& rec : r.records) out.push_back(rec.losses.total);
  return out;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(lr_at_step(0, 100, 3e-4, 3e-6) == doctest::Approx(3e-4).epsilon(1e-12));
  CHECK(lr_at_step(50, 100, 3e-4, 3e-6) == doctest::Approx(1.515e-4).epsilon(1e-12));
  CHECK(lr_at_step(100, 100, 3e-4, 3e-6) == doctest::Approx(3e-6).epsilon(1e-12));
  CHECK(lr_at_step(25, 100, 1.0, 0.0) == doctest::Approx(0.5 * (1 + std::cos(M_PI / 4))).epsilon(1e-12));
  for (long s = 1; s <= 100; ++s) CHECK(lr_at_step(s, 100, 3e-4, 3e-6) <= lr_at_step(s - 1, 100, 3e-4, 3e-6));
  CHECK_THROWS_AS(lr_at_step(0, 0, 3e-4, 3e-6), InputError);
  CHECK_THROWS_AS(lr_at_step(101, 100, 3e-4, 3e-6), InputError);

  TrainConfig t;
  t.warmup_steps = 4;
  CHECK(scheduled_lr(t, 0, 100) == doctest::Approx(0.25 * lr_at_step(0, 100, t.lr_max, t.lr_min)));
  CHECK(scheduled_lr(t, 3, 100) == doctest::Approx(lr_at_step(3, 100, t.lr_max, t.lr_min)));
  t.warmup_steps = 0;
  CHECK(scheduled_lr(t, 7, 100) == lr_at_step(7, 100, t.lr_max, t.lr_min));
}

TEST_CASE("adam first step closed forms") {
  const Matrix<float> start = (Matrix<float>(1, 3) << 1.0f, -2.0f, 0.5f).finished();
  auto make = [&] { return std::vector<NamedParameter<float>>{{"w", Tensor<float>::from_matrix(start, true)}}; };

  SUBCASE("zero gradient and no decay leaves the weights") {
    auto p = make();
    AdamState st;
    adam_step(p, st, 1e-2, AdamConfig{});
    CHECK(p[0].tensor.value() == start);
    CHECK(st.step == 1);
  }
  SUBCASE("first update is lr times the gradient sign") {
    auto p = make();
    sum(mul(p[0].tensor, Tensor<float>::from_matrix((Matrix<float>(1, 3) << 3.0f, -0.1f, 0.0f).finished()))).backward();
    AdamState st;
    adam_step(p, st, 1e-2, AdamConfig{});
    CHECK(p[0].tensor.value()(0, 0) == doctest::Approx(1.0 - 1e-2).epsilon(1e-6));
    CHECK(p[0].tensor.value()(0, 1) == doctest::Approx(-2.0 + 1e-2).epsilon(1e-6));
    CHECK(p[0].tensor.value()(0, 2) == 0.5f);
  }
  SUBCASE("decoupled decay shrinks by 1 - lr wd") {
    auto p = make();
    AdamState st;
    AdamConfig cfg;
    cfg.weight_decay = 0.1;
    adam_step(p, st, 1e-2, cfg);
    for (Index i = 0; i < 3; ++i) CHECK(p[0].tensor.value()(0, i) == doctest::Approx(start(0, i) * (1 - 1e-3)).epsilon(1e-6));
  }
  SUBCASE("non-finite gradient names the parameter and changes nothing") {
    auto p = make();
    p.push_back({"blocks.0.bad", Tensor<float>::from_matrix(start, true)});
    sum(mul(p[1].tensor, Tensor<float>::from_matrix(Matrix<float>::Constant(1, 3, std::nanf(""))))).backward();
    AdamState st;
    try {
      adam_step(p, st, 1e-2, AdamConfig{});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("blocks.0.bad") != std::string::npos);
    }
    CHECK(p[0].tensor.value() == start);
    CHECK(p[1].tensor.value() == start);
  }
}

TEST_CASE("ablation presets and config validation") {
  TrainConfig t;
  apply_ablation(t, "baseline");
  CHECK_FALSE(t.use_tag_loss);
  CHECK_FALSE(t.use_mask_loss);
  CHECK(t.visual_input == VisualInput::raw);
  CHECK_FALSE(t.needs_object_pipeline());
  apply_ablation(t, "tag");
  CHECK(t.needs_tag_stream());
  CHECK_FALSE(t.needs_anchor());
  apply_ablation(t, "mask");
  CHECK(t.needs_anchor());
  CHECK(t.loss_config().use_mask_loss);
  apply_ablation(t, "full");
  CHECK(t.loss_config().use_tag_loss);
  CHECK(t.loss_config().use_mask_loss);
  CHECK_THROWS_AS(apply_ablation(t, "everything"), ConfigError);

  t.tag_strategy = TagStrategy::padding;
  CHECK(t.pads_caption());
  CHECK_FALSE(t.loss_config().use_tag_loss);

  t = TrainConfig{};
  t.visual_input = VisualInput::mask;
  CHECK(t.needs_anchor());
  CHECK_FALSE(t.loss_config().use_mask_loss);

  t = TrainConfig{};
  t.visual_input = VisualInput::raw;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.batch_size = 1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lr_min = 1e-2;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK_THROWS_AS(parse_visual_input("both"), ConfigError);
}

TEST_CASE("config json round trip and strict keys") {
  TrainConfig t;
  t.lambda = 0.25;
  t.tag_strategy = TagStrategy::two_stream_padding;
  t.objects.top_n = 3;
  TrainConfig back;
  update_from_json(back, to_json(t));
  CHECK(to_json(back) == to_json(t));
  CHECK_THROWS_AS(update_from_json(back, nlohmann::json{{"lamda", 1}}), ConfigError);
  CHECK_THROWS_AS(update_from_json(back, nlohmann::json{{"epochs", "many"}}), ConfigError);
  update_from_json(back, nlohmann::json{{"epochs", 3}});
  CHECK(back.epochs == 3);
  CHECK(back.lambda == 0.25);
}

TEST_CASE("sample preparation follows the configuration") {
  const auto data = tiny_data(4);
  const auto text = make_text_context(data.vocab, data.tags, 16);
  auto cfg = tiny_train();

  apply_ablation(cfg, "baseline");
  const auto before = object_pipeline_invocations();
  Rng rng(1);
  const auto plain = prepare_sample(data.samples[0], cfg, text, 8, rng);
  CHECK(object_pipeline_invocations() == before);
  CHECK_FALSE(plain.anchor);
  CHECK_FALSE(plain.tags);
  CHECK(plain.clip.frames.size() == 2);
  CHECK(plain.caption.size() == 16);

  apply_ablation(cfg, "full");
  Rng rng2(1);
  const auto full = prepare_sample(data.samples[0], cfg, text, 8, rng2);
  REQUIRE(full.anchor);
  REQUIRE(full.tags);
  CHECK(full.anchor->keep_grid.rows() == 4);
  CHECK(full.anchor->keep_grid.count() > 0);
  CHECK(full.anchor_temporal_index >= 0);
  CHECK(full.anchor_temporal_index < 2);

  auto bare = data.samples[0];
  bare.objects.clear();
  Rng rng3(1);
  const auto fallback = prepare_sample(bare, cfg, text, 8, rng3);
  REQUIRE(fallback.anchor);
  CHECK((fallback.anchor->keep_grid == central_crop_grid(32, 32, 8)).all());
  REQUIRE(fallback.tags);
  CHECK((*fallback.tags)[1] == tokens::kNoObj);
}

TEST_CASE("loss switches select the streams") {
  const auto data = tiny_data(4);
  const auto text = make_text_context(data.vocab, data.tags, 16);
  DualEncoder<float> model(tiny_encoder(), data.vocab.size(), 5);
  auto prepare = [&](const TrainConfig& cfg) {
    std::vector<PreparedSample> batch;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      Rng rng(sample_seed(1, 0, i));
      batch.push_back(prepare_sample(data.samples[i], cfg, text, 8, rng));
    }
    return batch;
  };
  auto cfg = tiny_train();
  for (const char* name : {"baseline", "tag", "mask", "full"}) {
    CAPTURE(std::string(name));
    apply_ablation(cfg, name);
    const auto batch = prepare(cfg);
    StreamBatch<float> streams;
    const auto terms = compute_losses(batch, model, cfg, &streams);
    CHECK(terms.tag.defined() == cfg.use_tag_loss);
    CHECK(terms.mask.defined() == cfg.use_mask_loss);
    CHECK(streams.t_l.defined() == cfg.use_tag_loss);
    CHECK(streams.v_l.defined() == cfg.use_mask_loss);
    CHECK(std::isfinite(terms.total.item()));
  }

  // Only the tag term: the text tower still learns through the tag stream.
  apply_ablation(cfg, "tag");
  const auto batch = prepare(cfg);
  model.set_requires_grad(true);
  model.zero_grad();
  const auto terms = compute_losses(batch, model, cfg);
  terms.tag.backward();
  CHECK(model.parameters().at("text.token_embed").grad().cwiseAbs().maxCoeff() > 0);
  CHECK(model.parameters().at("video.patch_embed.weight").grad().cwiseAbs().maxCoeff() > 0);

  // With lambda = 0 the full objective reduces to the matching term.
  apply_ablation(cfg, "full");
  cfg.lambda = 0;
  const auto zero = compute_losses(prepare(cfg), model, cfg);
  CHECK(zero.total.item() == zero.matching.item());

  auto mask_only = tiny_train();
  mask_only.visual_input = VisualInput::mask;
  mask_only.use_tag_loss = false;
  StreamBatch<float> s;
  const auto m = compute_losses(prepare(mask_only), model, mask_only, &s);
  CHECK_FALSE(m.mask.defined());
  CHECK_FALSE(s.v_l.defined());
  CHECK(m.total.item() == m.matching.item());
}

TEST_CASE("pretraining is deterministic and resumable") {
  const auto data = tiny_data();
  PretrainOptions opt;
  opt.train = tiny_train();
  opt.encoder = tiny_encoder();

  const auto dir_a = scratch("a");
  opt.out_dir = dir_a;
  const auto a = run_pretrain(opt, data);
  CHECK(a.total_steps == 8);
  CHECK(a.steps_done == 8);
  opt.out_dir = scratch("b");
  const auto b = run_pretrain(opt, data);
  CHECK(totals(a) == totals(b));
  for (double v : totals(a)) CHECK(std::isfinite(v));

  std::ifstream metrics(dir_a / "metrics.jsonl");
  std::string line;
  long lines = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<long>() == lines);
    CHECK(j.contains("loss_tag"));
    ++lines;
  }
  CHECK(lines == 8);

  opt.out_dir = scratch("c");
  opt.max_steps = 5;
  const auto first = run_pretrain(opt, data);
  CHECK(first.steps_done == 5);
  opt.max_steps = -1;
  opt.resume = true;
  const auto rest = run_pretrain(opt, data);
  CHECK(rest.records.size() == 3);
  auto joined = totals(first);
  for (double v : totals(rest)) joined.push_back(v);
  REQUIRE(joined.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(joined[i] - totals(a)[i]) < 1e-5);

  const auto loaded = load_model(opt.out_dir / "last.oatr");
  CHECK(loaded.step == 8);
  CHECK(loaded.vocab.words() == data.vocab.words());
  CHECK(to_json(loaded.train) == to_json(opt.train));
  const auto ref = load_model(dir_a / "last.oatr");
  for (std::size_t i = 0; i < ref.model.parameters().entries().size(); ++i) {
    const auto& x = ref.model.parameters().entries()[i].tensor.value();
    const auto& y = loaded.model.parameters().entries()[i].tensor.value();
    CHECK((x - y).cwiseAbs().maxCoeff() < 1e-5);
  }

  auto changed = opt;
  changed.train.lambda = 0.1;
  CHECK_THROWS_AS(run_pretrain(changed, data), ConfigError);
}

TEST_CASE("loss falls over the first epochs") {
  const auto data = tiny_data(16);
  PretrainOptions opt;
  opt.train = tiny_train();
  opt.train.epochs = 5;
  opt.encoder = tiny_encoder();
  opt.out_dir = scratch("fall");
  const auto r = run_pretrain(opt, data);
  std::vector<double> epoch_mean(5, 0.0);
  for (const auto& rec : r.records) epoch_mean[static_cast<std::size_t>(rec.epoch)] += rec.losses.total / 4;
  CHECK(epoch_mean[4] < epoch_mean[0]);
}

TEST_CASE("pretraining rejects too little data") {
  auto data = tiny_data(4);
  data.samples.resize(3);
  PretrainOptions opt;
  opt.train = tiny_train();
  opt.encoder = tiny_encoder();
  opt.out_dir = scratch("small");
  CHECK_THROWS_AS(run_pretrain(opt, data), InputError);
}
