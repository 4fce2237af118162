#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "oatr/errors.hpp"
#include "oatr/object_pipeline.hpp"

using namespace oatr;

namespace {

ObjectConfig no_randomness() {
  ObjectConfig c;
  c.drop_prob = 0.0;
  c.shift_prob = 0.0;
  c.extra_mask_prob = 0.0;
  return c;
}

ObjectAnnotation ann(int tag, double score, Box box = {0.1, 0.1, 0.2, 0.2}) {
  return ObjectAnnotation{0, box, tag, score};
}

// Independent oracle: does the pixel rectangle of cell (r, c) overlap the
// box with positive area? Works in normalized coordinates.
bool oracle_overlaps(const Box& b, int r, int c, int rows, int cols) {
  const double cx0 = static_cast<double>(c) / cols, cx1 = static_cast<double>(c + 1) / cols;
  const double cy0 = static_cast<double>(r) / rows, cy1 = static_cast<double>(r + 1) / rows;
  return b.x1 < cx1 && cx0 < b.x2 && b.y1 < cy1 && cy0 < b.y2;
}

}  // namespace

TEST_CASE("anchor frame nearest the clip centre") {
  Rng rng(1);
  const auto cfg = no_randomness();
  const std::vector<int> clip{2, 6, 10, 14};
  CHECK(select_anchor_frame(clip, std::vector<int>{3, 9, 20}, cfg, rng) == 9);
  CHECK(select_anchor_frame(clip, std::vector<int>{12, 8}, cfg, rng) == 8);
  CHECK_THROWS_AS(select_anchor_frame(clip, std::vector<int>{}, cfg, rng), InputError);
}

TEST_CASE("anchor frame singleton ignores shift") {
  ObjectConfig cfg;
  cfg.shift_prob = 1.0;
  Rng rng(2);
  for (int i = 0; i < 50; ++i) CHECK(select_anchor_frame(std::vector<int>{0, 4, 8}, std::vector<int>{5}, cfg, rng) == 5);
}

TEST_CASE("anchor shift moves to a neighbouring available frame") {
  ObjectConfig cfg;
  cfg.shift_prob = 1.0;
  Rng rng(3);
  std::set<int> seen;
  for (int i = 0; i < 200; ++i) seen.insert(select_anchor_frame(std::vector<int>{10}, std::vector<int>{0, 5, 10, 15, 20}, cfg, rng));
  CHECK(seen == std::set<int>{5, 15});
  // Clamped at the boundary.
  seen.clear();
  for (int i = 0; i < 200; ++i) seen.insert(select_anchor_frame(std::vector<int>{0}, std::vector<int>{0, 5}, cfg, rng));
  CHECK(seen == std::set<int>{0, 5});
}

TEST_CASE("select_objects keeps best per tag, sorted and truncated") {
  auto cfg = no_randomness();
  cfg.top_n = 3;
  const int dog = 0, cat = 1, tree = 2;
  const std::vector<ObjectAnnotation> in{ann(dog, .9), ann(dog, .7), ann(cat, .8), ann(tree, .6), ann(cat, .5)};
  Rng rng(4);
  const auto out = select_objects(in, cfg, rng);
  REQUIRE(out.size() == 3);
  CHECK(out[0].tag_id == dog);
  CHECK(out[0].score == .9);
  CHECK(out[1].tag_id == cat);
  CHECK(out[1].score == .8);
  CHECK(out[2].tag_id == tree);
  CHECK(out[2].score == .6);
  CHECK(select_objects(std::vector<ObjectAnnotation>{}, cfg, rng).empty());
}

TEST_CASE("select_objects halves the area of a full-frame box") {
  auto cfg = no_randomness();
  Rng rng(5);
  const auto out = select_objects(std::vector<ObjectAnnotation>{ann(0, .5, {0, 0, 1, 1})}, cfg, rng);
  REQUIRE(out.size() == 1);
  const double side = 1.0 / std::sqrt(2.0);
  CHECK(out[0].box.width() == doctest::Approx(side).epsilon(1e-12));
  CHECK(out[0].box.height() == doctest::Approx(side).epsilon(1e-12));
  CHECK(out[0].box.x1 == doctest::Approx(0.5 - std::sqrt(2.0) / 4).epsilon(1e-12));
  CHECK(out[0].box.area() == doctest::Approx(0.5).epsilon(1e-12));
  // Small boxes are untouched.
  const Box small{0.1, 0.1, 0.5, 0.5};
  CHECK(shrink_large_box(small, 0.25) == small);
}

TEST_CASE("select_objects never drops everything") {
  ObjectConfig cfg;
  cfg.top_n = 1;
  cfg.drop_prob = 1.0;
  Rng rng(6);
  const auto out = select_objects(std::vector<ObjectAnnotation>{ann(7, .3)}, cfg, rng);
  REQUIRE(out.size() == 1);
  CHECK(out[0].tag_id == 7);

  cfg.top_n = 5;
  const auto many = select_objects(std::vector<ObjectAnnotation>{ann(1, .2), ann(2, .9), ann(3, .5)}, cfg, rng);
  REQUIRE(many.size() == 1);
  CHECK(many[0].tag_id == 2);
}

TEST_CASE("select_objects property: distinct tags, at most N, reproducible") {
  Rng gen(7);
  for (int trial = 0; trial < 200; ++trial) {
    ObjectConfig cfg;
    cfg.top_n = 1 + static_cast<int>(gen.uniform_int(6));
    std::vector<ObjectAnnotation> in;
    const int n = static_cast<int>(gen.uniform_int(15));
    for (int i = 0; i < n; ++i) {
      const double x1 = gen.uniform() * 0.9, y1 = gen.uniform() * 0.9;
      in.push_back(ann(static_cast<int>(gen.uniform_int(6)), gen.uniform(),
                       {x1, y1, x1 + 0.01 + gen.uniform() * (0.99 - x1), y1 + 0.01 + gen.uniform() * (0.99 - y1)}));
    }
    const std::uint64_t seed = gen.next_u64();
    Rng a(seed), b(seed);
    const auto out = select_objects(in, cfg, a);
    CHECK(out == select_objects(in, cfg, b));
    CHECK(out.size() <= static_cast<std::size_t>(cfg.top_n));
    std::set<int> tags;
    for (const auto& o : out) tags.insert(o.tag_id);
    CHECK(tags.size() == out.size());
    CHECK(out.empty() == in.empty());
  }
}

TEST_CASE("patch mask from a single corner box") {
  const auto cfg = no_randomness();
  Rng rng(8);
  const std::vector<ObjectAnnotation> kept{ann(0, .9, {0, 0, 0.25, 0.25})};
  const auto grid = build_patch_mask(kept, 64, 64, 16, cfg, rng);
  REQUIRE(grid.rows() == 4);
  REQUIRE(grid.cols() == 4);
  CHECK(grid(0, 0));
  CHECK(grid.count() == 1);
}

TEST_CASE("patch mask falls back to the central crop") {
  const auto cfg = no_randomness();
  Rng rng(9);
  KeepGrid centre = KeepGrid::Constant(4, 4, false);
  centre.block(1, 1, 2, 2).setConstant(true);

  const auto full = build_patch_mask(std::vector<ObjectAnnotation>{ann(0, .9, {0, 0, 1, 1})}, 64, 64, 16, cfg, rng);
  CHECK((full == centre).all());
  const auto none = build_patch_mask(std::vector<ObjectAnnotation>{}, 64, 64, 16, cfg, rng);
  CHECK((none == centre).all());
  CHECK((central_crop_grid(64, 64, 16) == centre).all());
  // A single cell grid still keeps something.
  CHECK(central_crop_grid(16, 16, 16).count() == 1);
}

TEST_CASE("patch mask rejects a non-tiling patch size") {
  const auto cfg = no_randomness();
  Rng rng(10);
  CHECK_THROWS_AS(build_patch_mask(std::vector<ObjectAnnotation>{}, 64, 64, 15, cfg, rng), DimensionError);
}

TEST_CASE("patch mask matches the intersection oracle on random boxes") {
  auto cfg = no_randomness();
  cfg.crop_fallback_keep_frac = 1.0;
  Rng gen(11);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int patch = 4 << gen.uniform_int(3);  // 4, 8, 16
    const int rows = 1 + static_cast<int>(gen.uniform_int(6));
    const int cols = 1 + static_cast<int>(gen.uniform_int(6));
    std::vector<ObjectAnnotation> kept;
    const int n = 1 + static_cast<int>(gen.uniform_int(3));
    for (int i = 0; i < n; ++i) {
      // Coordinates on a 1/64 lattice so cell edges are hit exactly.
      auto coord = [&] { return static_cast<double>(gen.uniform_int(65)) / 64.0; };
      double x1 = coord(), x2 = coord(), y1 = coord(), y2 = coord();
      if (x1 == x2 || y1 == y2) continue;
      kept.push_back(ann(i, .5, {std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)}));
    }
    if (kept.empty()) continue;
    Rng rng(gen.next_u64());
    const auto grid = build_patch_mask(kept, rows * patch, cols * patch, patch, cfg, rng);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const bool expect = std::any_of(kept.begin(), kept.end(), [&](const auto& k) {
          return oracle_overlaps(k.box, r, c, rows, cols);
        });
        CHECK(grid(r, c) == expect);
      }
    }
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("extra masking thins object cells and is never empty") {
  ObjectConfig cfg = no_randomness();
  cfg.extra_mask_prob = 1.0;
  Rng rng(12);
  const std::vector<ObjectAnnotation> kept{ann(0, .9, {0.0, 0.0, 0.3, 0.5}), ann(1, .8, {0.6, 0.6, 0.7, 0.7})};
  const auto grid = build_patch_mask(kept, 64, 64, 16, cfg, rng);
  REQUIRE(grid.count() == 1);
  // Cell with the largest overlap: (0, 0) is fully covered by the first box.
  CHECK(grid(0, 0));

  cfg.extra_mask_prob = 0.5;
  for (int t = 0; t < 100; ++t) {
    const auto g = build_patch_mask(kept, 64, 64, 16, cfg, rng);
    CHECK(g.any());
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) {
        if (g(r, c)) CHECK(std::any_of(kept.begin(), kept.end(), [&](const auto& k) { return oracle_overlaps(k.box, r, c, 4, 4); }));
      }
    }
  }
}

TEST_CASE("tag streams") {
  const TokenId woman = 10, tree = 11, a = 12, waters = 13;
  const std::vector<std::vector<TokenId>> tag_ids{{woman}, {tree}};
  const std::vector<ObjectAnnotation> kept{ann(1, .6), ann(0, .9)};
  const std::vector<TokenId> caption{tokens::kCls, a, woman, waters, a, tree, tokens::kPad, tokens::kPad};
  const std::vector<TokenId> bare{tokens::kCls, a, woman, waters, a, tree};

  auto pad_to = [](std::vector<TokenId> v, std::size_t n) {
    v.resize(n, tokens::kPad);
    return v;
  };

  const auto two = build_tag_stream(kept, TagStrategy::two_stream, caption, tag_ids, 8);
  CHECK(two.caption == pad_to(bare, 8));
  REQUIRE(two.tags.has_value());
  CHECK(*two.tags == pad_to({tokens::kCls, woman, tree}, 8));

  const auto pad = build_tag_stream(kept, TagStrategy::padding, caption, tag_ids, 12);
  CHECK_FALSE(pad.tags.has_value());
  CHECK(pad.caption == pad_to({tokens::kCls, a, woman, waters, a, tree, tokens::kSep, woman, tree}, 12));

  const auto both = build_tag_stream(kept, TagStrategy::two_stream_padding, caption, tag_ids, 12);
  CHECK(both.caption == pad_to(bare, 12));
  CHECK(*both.tags == pad_to({tokens::kCls, a, woman, waters, a, tree, tokens::kSep, woman, tree}, 12));

  const auto empty = build_tag_stream(std::vector<ObjectAnnotation>{}, TagStrategy::two_stream, caption, tag_ids, 4);
  CHECK(*empty.tags == std::vector<TokenId>{tokens::kCls, tokens::kNoObj, tokens::kPad, tokens::kPad});

  const auto truncated = build_tag_stream(kept, TagStrategy::padding, caption, tag_ids, 4);
  CHECK(truncated.caption == std::vector<TokenId>{tokens::kCls, a, woman, waters});
}

TEST_CASE("tag strategy names") {
  CHECK(parse_tag_strategy("padding") == TagStrategy::padding);
  CHECK(parse_tag_strategy("two-stream") == TagStrategy::two_stream);
  CHECK(parse_tag_strategy("two_stream_padding") == TagStrategy::two_stream_padding);
  CHECK(to_string(TagStrategy::two_stream) == "two-stream");
  CHECK_THROWS_AS(parse_tag_strategy("three-stream"), ConfigError);
}

TEST_CASE("annotation validation") {
  CHECK_NOTHROW(validate_annotation(ann(0, .5), 1));
  CHECK_THROWS_AS(validate_annotation(ann(0, .5, {0.5, 0.1, 0.2, 0.2}), 1), InputError);
  CHECK_THROWS_AS(validate_annotation(ann(0, .5, {0.1, 0.1, 1.2, 0.2}), 1), InputError);
  CHECK_THROWS_AS(validate_annotation(ann(3, .5), 2), InputError);
  CHECK_THROWS_AS(validate_annotation(ann(0, 1.5), 1), InputError);
  ObjectConfig bad;
  bad.drop_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("masked frame rendering") {
  Image frame(32, 32, 3, 7);
  KeepGrid grid = KeepGrid::Constant(2, 2, false);
  grid(0, 1) = true;
  const auto out = render_masked_frame(frame, grid, 16);
  CHECK(out.at(0, 20, 0) == 7);
  CHECK(out.at(0, 0, 0) == 128);
  CHECK(out.at(31, 31, 2) == 128);
}

TEST_CASE("invocation counter moves") {
  const auto before = object_pipeline_invocations();
  Rng rng(13);
  (void)select_anchor_frame(std::vector<int>{1}, std::vector<int>{1}, ObjectConfig{}, rng);
  CHECK(object_pipeline_invocations() == before + 1);
}
