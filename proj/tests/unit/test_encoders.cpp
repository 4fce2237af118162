#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "oatr/encoders.hpp"
#include "oatr/grad_check.hpp"

using namespace oatr;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.patch_size = 8;
  c.image_size = 16;
  c.max_frames = 4;
  c.max_text_tokens = 8;
  c.shared_embed_dim = 8;
  return c;
}

Image random_image(Rng& rng, int size) {
  Image img(size, size, 3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
  return img;
}

template <typename Scalar>
double max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return static_cast<double>((a.value() - b.value()).cwiseAbs().maxCoeff());
}

template <typename Scalar>
void check_unit_rows(const Tensor<Scalar>& x) {
  for (Index r = 0; r < x.rows(); ++r) CHECK(std::abs(static_cast<double>(x.value().row(r).norm()) - 1.0) < 1e-6);
}

constexpr std::size_t kVocab = 20;

}  // namespace

TEST_CASE("encoder config validation") {
  auto c = tiny_config();
  c.image_size = 20;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameters use the documented prefixes and initialization") {
  DualEncoder<float> enc(tiny_config(), kVocab, 1);
  for (const auto& p : enc.parameters().entries()) {
    const bool known = p.name.rfind("text.", 0) == 0 || p.name.rfind("video.", 0) == 0 ||
                       p.name.rfind("proj_text.", 0) == 0 || p.name.rfind("proj_video.", 0) == 0;
    CAPTURE(p.name);
    CHECK(known);
    const auto& v = p.tensor.value();
    if (p.name.size() > 5 && p.name.substr(p.name.size() - 5) == ".gain") {
      CHECK((v.array() == 1.0f).all());
    } else if (p.name.size() > 5 && p.name.substr(p.name.size() - 5) == ".bias") {
      CHECK((v.array() == 0.0f).all());
    } else {
      CHECK(v.cwiseAbs().maxCoeff() <= 0.04f + 1e-7f);
    }
  }
  CHECK(enc.parameters().at("text.token_embed").shape() == Shape{20, 16});
}

TEST_CASE("text encoder: unit norm, determinism, order sensitivity") {
  DualEncoder<float> a(tiny_config(), kVocab, 7), b(tiny_config(), kVocab, 7);
  const std::vector<std::vector<TokenId>> batch{{1, 5, 6, 7, 0, 0}, {1, 9}, {1, tokens::kNoObj}};
  const auto ea = a.encode_text(batch), eb = b.encode_text(batch);
  check_unit_rows(ea);
  CHECK(std::memcmp(ea.data(), eb.data(), sizeof(float) * static_cast<std::size_t>(ea.size())) == 0);

  const std::vector<std::vector<TokenId>> permuted{{1, 7, 5, 6}};
  const std::vector<std::vector<TokenId>> original{{1, 5, 6, 7}};
  CHECK(max_abs_diff(a.encode_text(original), a.encode_text(permuted)) > 1e-4);
  // Trailing PAD does not change the result.
  const std::vector<std::vector<TokenId>> padded{{1, 5, 6, 7, 0, 0, 0, 0}};
  CHECK(max_abs_diff(a.encode_text(original), a.encode_text(padded)) == 0.0);
  // Batch composition does not leak between samples.
  CHECK(max_abs_diff(a.encode_text(original), Tensor<float>::from_matrix(ea.value().row(0))) < 1e-6);

  const std::vector<std::vector<TokenId>> tags{{1, 5, 6}}, tags_swapped{{1, 6, 5}};
  CHECK(max_abs_diff(a.encode_tags(tags), a.encode_tags(tags_swapped)) > 1e-4);
}

TEST_CASE("text encoder input errors") {
  DualEncoder<float> enc(tiny_config(), kVocab, 7);
  CHECK_THROWS_AS(enc.encode_text(std::vector<std::vector<TokenId>>{{1, 25}}), InputError);
  CHECK_THROWS_AS(enc.encode_text(std::vector<std::vector<TokenId>>{{}}), InputError);
  CHECK_THROWS_AS(enc.encode_text(std::vector<std::vector<TokenId>>{{1, 5, 5, 5, 5, 5, 5, 5, 5}}), InputError);
}

TEST_CASE("video encoder: norms and L=1 equals the image path") {
  Rng rng(3);
  DualEncoder<float> enc(tiny_config(), kVocab, 11);
  std::vector<Image> frames;
  for (int i = 0; i < 4; ++i) frames.push_back(random_image(rng, 16));
  const std::vector<ClipInput> clips{{{&frames[0], &frames[1], &frames[2], &frames[3]}}, {{&frames[2]}}};
  const auto v = enc.encode_video(clips);
  check_unit_rows(v);

  const std::vector<ClipInput> single{{{&frames[2]}}};
  const Image* img[] = {&frames[2]};
  const auto via_video = enc.video_features(single);
  const auto via_image = enc.image_features(img, DualEncoder<float>::Pooling::cls);
  CHECK(max_abs_diff(via_video, via_image) < 1e-5);
  CHECK(max_abs_diff(enc.encode_video(single), Tensor<float>::from_matrix(v.value().row(1))) < 1e-5);

  // Frame order matters through the temporal embeddings.
  const std::vector<ClipInput> reversed{{{&frames[3], &frames[2], &frames[1], &frames[0]}}};
  CHECK(max_abs_diff(enc.encode_video(reversed), Tensor<float>::from_matrix(v.value().row(0))) > 1e-5);

  Image wrong(8, 8, 3);
  CHECK_THROWS_AS(enc.encode_video(std::vector<ClipInput>{{{&wrong}}}), DimensionError);
  const std::vector<ClipInput> too_long{{{&frames[0], &frames[0], &frames[0], &frames[0], &frames[0]}}};
  CHECK_THROWS_AS(enc.encode_video(too_long), DimensionError);
}

TEST_CASE("masked anchor: all kept equals mean pooling, masked pixels are ignored") {
  Rng rng(5);
  DualEncoder<float> enc(tiny_config(), kVocab, 13);
  Image frame = random_image(rng, 16);
  const KeepGrid all = KeepGrid::Constant(2, 2, true);
  const std::vector<AnchorInput> anchors{{&frame, all, 0}};
  const Image* img[] = {&frame};
  CHECK(max_abs_diff(enc.anchor_features(anchors), enc.image_features(img, DualEncoder<float>::Pooling::mean_patches)) < 1e-5);
  check_unit_rows(enc.encode_masked_anchor(anchors));

  KeepGrid one = KeepGrid::Constant(2, 2, false);
  one(1, 0) = true;
  const auto before = enc.encode_masked_anchor(std::vector<AnchorInput>{{&frame, one, 1}});
  Image perturbed = frame;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const bool kept = y >= 8 && x < 8;
      if (!kept) {
        for (int c = 0; c < 3; ++c) perturbed.at(y, x, c) = static_cast<std::uint8_t>(rng.uniform_int(256));
      }
    }
  }
  const auto after = enc.encode_masked_anchor(std::vector<AnchorInput>{{&perturbed, one, 1}});
  CHECK(max_abs_diff(before, after) < 1e-6);
  // A kept pixel does matter.
  perturbed.at(9, 1, 0) = static_cast<std::uint8_t>(perturbed.at(9, 1, 0) ^ 0xff);
  CHECK(max_abs_diff(before, enc.encode_masked_anchor(std::vector<AnchorInput>{{&perturbed, one, 1}})) > 1e-6);

  CHECK_THROWS_AS(enc.encode_masked_anchor(std::vector<AnchorInput>{{&frame, KeepGrid::Constant(2, 2, false), 0}}), InputError);
  CHECK_THROWS_AS(enc.encode_masked_anchor(std::vector<AnchorInput>{{&frame, KeepGrid::Constant(3, 3, true), 0}}), DimensionError);
}

TEST_CASE("weight sharing between streams") {
  Rng rng(6);
  DualEncoder<float> enc(tiny_config(), kVocab, 17);
  Image frame = random_image(rng, 16);
  const std::vector<std::vector<TokenId>> text{{1, 5, 6}};
  const std::vector<ClipInput> clip{{{&frame}}};
  const std::vector<AnchorInput> anchor{{&frame, KeepGrid::Constant(2, 2, true), 0}};
  const auto t0 = enc.encode_text(text), tl0 = enc.encode_tags(text);
  const auto v0 = enc.encode_video(clip), vl0 = enc.encode_masked_anchor(anchor);
  CHECK(max_abs_diff(t0, tl0) == 0.0);

  enc.parameters().at("text.blocks.0.attn.q.weight").mutable_value()(0, 0) += 0.5f;
  enc.parameters().at("text.token_embed").mutable_value()(5, 0) += 0.5f;
  CHECK(max_abs_diff(t0, enc.encode_text(text)) > 1e-6);
  CHECK(max_abs_diff(tl0, enc.encode_tags(text)) > 1e-6);
  CHECK(max_abs_diff(v0, enc.encode_video(clip)) == 0.0);

  enc.parameters().at("video.blocks.1.mlp.fc1.weight").mutable_value()(0, 0) += 0.5f;
  CHECK(max_abs_diff(v0, enc.encode_video(clip)) > 1e-6);
  CHECK(max_abs_diff(vl0, enc.encode_masked_anchor(anchor)) > 1e-6);
}

TEST_CASE("state round-trips through a checkpoint") {
  DualEncoder<float> a(tiny_config(), kVocab, 21), b(tiny_config(), kVocab, 22);
  const auto path = std::filesystem::temp_directory_path() / "oatr_test_encoders.oatr";
  const auto state = a.state();
  save_checkpoint(path, state);
  b.load_state(load_checkpoint(path));
  for (std::size_t i = 0; i < a.parameters().entries().size(); ++i) {
    CHECK(a.parameters().entries()[i].tensor.value() == b.parameters().entries()[i].tensor.value());
  }
  std::vector<NamedArray> partial(state.begin(), state.end() - 1);
  CHECK_THROWS_AS(b.load_state(partial), ParseError);
}

TEST_CASE("gradients through the full encoders match finite differences") {
  EncoderConfig c;
  c.embed_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.patch_size = 16;
  c.image_size = 32;
  c.max_frames = 2;
  c.max_text_tokens = 4;
  c.shared_embed_dim = 4;
  auto enc = DualEncoder<float>(c, 8, 31).cast<double>();
  Rng rng(8);
  Image frame = random_image(rng, 32);
  const std::vector<ClipInput> clip{{{&frame}}};
  std::vector<Tensor<double>> leaves;
  for (auto& p : enc.parameters().entries()) {
    if (p.name.rfind("video.", 0) == 0 || p.name.rfind("proj_video.", 0) == 0) leaves.push_back(p.tensor);
  }
  Matrix<double> w(1, 4);
  w << 0.3, -1.2, 0.7, 2.0;
  const auto weights = Tensor<double>::from_matrix(w);
  auto report = grad_check([&] { return sum(mul(enc.encode_video(clip), weights)); }, leaves);
  CHECK(report.max_rel_error < 1e-4);

  std::vector<Tensor<double>> text_leaves;
  for (auto& p : enc.parameters().entries()) {
    if (p.name.rfind("text.", 0) == 0 || p.name.rfind("proj_text.", 0) == 0) text_leaves.push_back(p.tensor);
  }
  const std::vector<std::vector<TokenId>> text{{1, 5, 6, 7}, {1, 4}};
  Matrix<double> w2(2, 4);
  w2 << 0.3, -1.2, 0.7, 2.0, 1.1, 0.4, -0.9, 0.2;
  const auto weights2 = Tensor<double>::from_matrix(w2);
  auto text_report = grad_check([&] { return sum(mul(enc.encode_text(text), weights2)); }, text_leaves);
  CHECK(text_report.max_rel_error < 1e-4);
}
