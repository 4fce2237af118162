#pragma once

// Anchor-frame selection, object selection, object-guided patch masking and
// tag-stream construction. All randomized steps draw from the caller's Rng.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "oatr/image.hpp"
#include "oatr/rng.hpp"
#include "oatr/tensor.hpp"
#include "oatr/tokens.hpp"

namespace oatr {

/// Axis-aligned box in normalized [0, 1] frame coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

struct ObjectAnnotation {
  int frame_index = 0;
  Box box;
  int tag_id = 0;
  double score = 0;

  bool operator==(const ObjectAnnotation&) const = default;
};

/// Throws InputError when the box is unordered or out of [0, 1], the score
/// is outside [0, 1], or the tag is outside the vocabulary.
void validate_annotation(const ObjectAnnotation& a, std::size_t tag_vocab_size);

struct ObjectConfig {
  int top_n = 10;
  double drop_prob = 0.2;
  double shift_prob = 0.5;
  double extra_mask_prob = 0.2;
  double large_box_area_frac = 0.25;
  double crop_fallback_keep_frac = 0.75;

  void validate() const;
};

/// Patch keep/mask decisions, (H / patch) x (W / patch); true = kept.
using KeepGrid = BoolMatrix;

struct MaskedAnchorFrame {
  Image pixels;
  KeepGrid keep_grid;
  int anchor_frame_index = 0;
  std::vector<ObjectAnnotation> kept_objects;
};

/// Frame nearest the clip centre among frames that carry annotations
/// (ties to the smaller index), then with probability shift_prob a move to
/// the neighbouring available frame in a uniformly chosen direction.
int select_anchor_frame(std::span<const int> clip_frame_indices,
                        std::span<const int> object_frames_available, const ObjectConfig& config,
                        Rng& rng);

/// Halves the area of a box larger than `area_threshold` by scaling both
/// sides by 1/sqrt(2) about its centre, clamped to the unit square.
Box shrink_large_box(const Box& box, double area_threshold);

/// Best annotation per tag, score-descending, truncated to top_n, large
/// boxes shrunk, then random drops that never empty a non-empty selection.
std::vector<ObjectAnnotation> select_objects(std::span<const ObjectAnnotation> annotations,
                                             const ObjectConfig& config, Rng& rng);

/// Grid of cells lying inside the centred crop of half the frame area.
KeepGrid central_crop_grid(int frame_height, int frame_width, int patch_size);

/// Object-guided keep grid: cells overlapping a kept box with positive area,
/// thinned by extra_mask_prob, replaced by the central crop when too much
/// (or nothing) survives. Never all-false.
KeepGrid build_patch_mask(std::span<const ObjectAnnotation> kept, int frame_height,
                          int frame_width, int patch_size, const ObjectConfig& config, Rng& rng);

enum class TagStrategy { padding, two_stream, two_stream_padding };

TagStrategy parse_tag_strategy(std::string_view name);
std::string_view to_string(TagStrategy strategy);

/// Text inputs after applying a tag strategy. `caption` is what the caption
/// stream encodes; `tags` is the separate tag stream, absent for padding.
struct TagStreamTokens {
  std::vector<TokenId> caption;
  std::optional<std::vector<TokenId>> tags;
};

/// `caption_tokens` is tokenizer output (leading CLS, trailing PAD allowed);
/// `tag_token_ids[tag_id]` are the word ids of each tag name. Results are
/// truncated and PAD-filled to max_len.
TagStreamTokens build_tag_stream(std::span<const ObjectAnnotation> kept, TagStrategy strategy,
                                 std::span<const TokenId> caption_tokens,
                                 std::span<const std::vector<TokenId>> tag_token_ids,
                                 std::size_t max_len);

/// Renders masked patches mid-gray, for inspection.
Image render_masked_frame(const Image& frame, const KeepGrid& grid, int patch_size);

/// Number of calls into this module since process start. Evaluation code
/// asserts it does not move.
std::uint64_t object_pipeline_invocations();

}  // namespace oatr
