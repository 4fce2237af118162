#include "oatr/object_pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>

#include "oatr/errors.hpp"

namespace oatr {

namespace {

std::atomic<std::uint64_t> g_invocations{0};

void count_invocation() { g_invocations.fetch_add(1, std::memory_order_relaxed); }

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

std::uint64_t object_pipeline_invocations() { return g_invocations.load(); }

void validate_annotation(const ObjectAnnotation& a, std::size_t tag_vocab_size) {
  const auto& b = a.box;
  if (!(b.x1 < b.x2 && b.y1 < b.y2)) throw InputError("box not ordered");
  if (!in_unit(b.x1) || !in_unit(b.x2) || !in_unit(b.y1) || !in_unit(b.y2)) {
    throw InputError("box outside [0, 1]");
  }
  if (!in_unit(a.score)) throw InputError("score outside [0, 1]");
  if (a.tag_id < 0 || static_cast<std::size_t>(a.tag_id) >= tag_vocab_size) {
    throw InputError("tag id " + std::to_string(a.tag_id) + " outside vocabulary of " +
                     std::to_string(tag_vocab_size));
  }
  if (a.frame_index < 0) throw InputError("negative frame index");
}

void ObjectConfig::validate() const {
  for (double p : {drop_prob, shift_prob, extra_mask_prob, large_box_area_frac,
                   crop_fallback_keep_frac}) {
    if (!in_unit(p)) throw ConfigError("object config probabilities must lie in [0, 1]");
  }
  if (top_n < 1) throw ConfigError("object config: top_n must be >= 1");
}

int select_anchor_frame(std::span<const int> clip_frame_indices,
                        std::span<const int> object_frames_available, const ObjectConfig& config,
                        Rng& rng) {
  count_invocation();
  if (clip_frame_indices.empty()) throw InputError("select_anchor_frame: empty clip");
  if (object_frames_available.empty()) {
    throw InputError("select_anchor_frame: no frames with object annotations");
  }
  std::vector<int> available(object_frames_available.begin(), object_frames_available.end());
  std::sort(available.begin(), available.end());
  available.erase(std::unique(available.begin(), available.end()), available.end());

  const int central = clip_frame_indices[clip_frame_indices.size() / 2];
  std::size_t best = 0;
  for (std::size_t i = 1; i < available.size(); ++i) {
    if (std::abs(available[i] - central) < std::abs(available[best] - central)) best = i;
  }
  const bool shift = rng.bernoulli(config.shift_prob);
  const bool forward = rng.bernoulli(0.5);
  if (shift) {
    if (forward) {
      best = std::min(best + 1, available.size() - 1);
    } else if (best > 0) {
      --best;
    }
  }
  return available[best];
}

Box shrink_large_box(const Box& box, double area_threshold) {
  if (!(box.area() > area_threshold)) return box;
  const double s = 1.0 / std::sqrt(2.0);
  const double cx = 0.5 * (box.x1 + box.x2);
  const double cy = 0.5 * (box.y1 + box.y2);
  const double hw = 0.5 * box.width() * s;
  const double hh = 0.5 * box.height() * s;
  return Box{std::clamp(cx - hw, 0.0, 1.0), std::clamp(cy - hh, 0.0, 1.0),
             std::clamp(cx + hw, 0.0, 1.0), std::clamp(cy + hh, 0.0, 1.0)};
}

std::vector<ObjectAnnotation> select_objects(std::span<const ObjectAnnotation> annotations,
                                             const ObjectConfig& config, Rng& rng) {
  count_invocation();
  // Highest score per tag; equal scores keep the earlier annotation.
  std::map<int, ObjectAnnotation> best;
  for (const auto& a : annotations) {
    auto it = best.find(a.tag_id);
    if (it == best.end() || a.score > it->second.score) best[a.tag_id] = a;
  }
  std::vector<ObjectAnnotation> out;
  out.reserve(best.size());
  for (auto& [tag, a] : best) out.push_back(a);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tag_id < b.tag_id;
  });
  if (out.size() > static_cast<std::size_t>(config.top_n)) out.resize(static_cast<std::size_t>(config.top_n));
  for (auto& a : out) a.box = shrink_large_box(a.box, config.large_box_area_frac);

  std::vector<ObjectAnnotation> kept;
  for (const auto& a : out) {
    if (!rng.bernoulli(config.drop_prob)) kept.push_back(a);
  }
  if (kept.empty() && !out.empty()) kept.push_back(out.front());
  return kept;
}

KeepGrid central_crop_grid(int frame_height, int frame_width, int patch_size) {
  const int rows = frame_height / patch_size;
  const int cols = frame_width / patch_size;
  KeepGrid grid = KeepGrid::Constant(rows, cols, false);
  const double s = 1.0 / std::sqrt(2.0);
  const double y0 = 0.5 * frame_height * (1.0 - s), y1 = 0.5 * frame_height * (1.0 + s);
  const double x0 = 0.5 * frame_width * (1.0 - s), x1 = 0.5 * frame_width * (1.0 + s);
  bool any = false;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const bool inside = r * patch_size >= y0 && (r + 1) * patch_size <= y1 &&
                          c * patch_size >= x0 && (c + 1) * patch_size <= x1;
      grid(r, c) = inside;
      any = any || inside;
    }
  }
  if (!any) {
    // Crop smaller than one cell: keep the cells touching the frame centre.
    const double cy = 0.5 * frame_height, cx = 0.5 * frame_width;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        grid(r, c) = r * patch_size <= cy && cy <= (r + 1) * patch_size &&
                     c * patch_size <= cx && cx <= (c + 1) * patch_size;
      }
    }
  }
  return grid;
}

KeepGrid build_patch_mask(std::span<const ObjectAnnotation> kept, int frame_height,
                          int frame_width, int patch_size, const ObjectConfig& config, Rng& rng) {
  count_invocation();
  if (patch_size <= 0 || frame_height % patch_size != 0 || frame_width % patch_size != 0) {
    throw DimensionError("build_patch_mask: patch " + std::to_string(patch_size) +
                         " does not tile a " + std::to_string(frame_height) + "x" +
                         std::to_string(frame_width) + " frame");
  }
  const int rows = frame_height / patch_size;
  const int cols = frame_width / patch_size;
  KeepGrid grid = KeepGrid::Constant(rows, cols, false);
  Eigen::ArrayXXd overlap = Eigen::ArrayXXd::Zero(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double cy0 = r * patch_size, cy1 = (r + 1) * patch_size;
      const double cx0 = c * patch_size, cx1 = (c + 1) * patch_size;
      for (const auto& a : kept) {
        const double w = std::min(a.box.x2 * frame_width, cx1) - std::max(a.box.x1 * frame_width, cx0);
        const double h = std::min(a.box.y2 * frame_height, cy1) - std::max(a.box.y1 * frame_height, cy0);
        if (w > 0 && h > 0) {
          grid(r, c) = true;
          overlap(r, c) += w * h;
        }
      }
    }
  }

  if (grid.any()) {
    KeepGrid thinned = grid;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (grid(r, c) && rng.bernoulli(config.extra_mask_prob)) thinned(r, c) = false;
      }
    }
    if (!thinned.any()) {
      int br = 0, bc = 0;
      double bo = -1;
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          if (grid(r, c) && overlap(r, c) > bo) {
            bo = overlap(r, c);
            br = r;
            bc = c;
          }
        }
      }
      thinned(br, bc) = true;
    }
    grid = thinned;
  }

  const double kept_frac = static_cast<double>(grid.count()) / static_cast<double>(rows * cols);
  if (!grid.any() || kept_frac > config.crop_fallback_keep_frac) {
    return central_crop_grid(frame_height, frame_width, patch_size);
  }
  return grid;
}

TagStrategy parse_tag_strategy(std::string_view name) {
  if (name == "padding") return TagStrategy::padding;
  if (name == "two-stream" || name == "two_stream") return TagStrategy::two_stream;
  if (name == "two-stream-padding" || name == "two_stream_padding") {
    return TagStrategy::two_stream_padding;
  }
  throw ConfigError("unknown tag strategy '" + std::string(name) +
                    "' (expected padding, two-stream, two-stream-padding)");
}

std::string_view to_string(TagStrategy strategy) {
  switch (strategy) {
    case TagStrategy::padding: return "padding";
    case TagStrategy::two_stream: return "two-stream";
    case TagStrategy::two_stream_padding: return "two-stream-padding";
  }
  return "?";
}

TagStreamTokens build_tag_stream(std::span<const ObjectAnnotation> kept, TagStrategy strategy,
                                 std::span<const TokenId> caption_tokens,
                                 std::span<const std::vector<TokenId>> tag_token_ids,
                                 std::size_t max_len) {
  count_invocation();
  if (max_len == 0) throw InputError("build_tag_stream: max_len must be positive");

  std::vector<TokenId> caption(caption_tokens.begin(), caption_tokens.end());
  while (!caption.empty() && caption.back() == tokens::kPad) caption.pop_back();
  if (caption.empty() || caption.front() != tokens::kCls) caption.insert(caption.begin(), tokens::kCls);

  // Score-descending, one entry per tag.
  std::vector<ObjectAnnotation> ordered(kept.begin(), kept.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<TokenId> tag_words;
  std::vector<int> seen;
  for (const auto& a : ordered) {
    if (std::find(seen.begin(), seen.end(), a.tag_id) != seen.end()) continue;
    seen.push_back(a.tag_id);
    if (a.tag_id < 0 || static_cast<std::size_t>(a.tag_id) >= tag_token_ids.size()) {
      throw InputError("build_tag_stream: tag id " + std::to_string(a.tag_id) + " has no tokens");
    }
    const auto& words = tag_token_ids[static_cast<std::size_t>(a.tag_id)];
    tag_words.insert(tag_words.end(), words.begin(), words.end());
  }
  if (tag_words.empty()) tag_words.push_back(tokens::kNoObj);

  auto finish = [max_len](std::vector<TokenId> seq) {
    seq.resize(max_len, tokens::kPad);
    return seq;
  };
  auto padded_caption = [&] {
    std::vector<TokenId> seq = caption;
    seq.push_back(tokens::kSep);
    seq.insert(seq.end(), tag_words.begin(), tag_words.end());
    return seq;
  };

  TagStreamTokens out;
  switch (strategy) {
    case TagStrategy::padding:
      out.caption = finish(padded_caption());
      break;
    case TagStrategy::two_stream: {
      std::vector<TokenId> seq{tokens::kCls};
      seq.insert(seq.end(), tag_words.begin(), tag_words.end());
      out.caption = finish(caption);
      out.tags = finish(std::move(seq));
      break;
    }
    case TagStrategy::two_stream_padding:
      out.caption = finish(caption);
      out.tags = finish(padded_caption());
      break;
  }
  return out;
}

Image render_masked_frame(const Image& frame, const KeepGrid& grid, int patch_size) {
  Image out = frame;
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < frame.width; ++x) {
      const int r = y / patch_size, c = x / patch_size;
      if (r < grid.rows() && c < grid.cols() && grid(r, c)) continue;
      for (int ch = 0; ch < frame.channels; ++ch) out.at(y, x, ch) = 128;
    }
  }
  return out;
}

}  // namespace oatr
