#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "oatr/image.hpp"
#include "oatr/object_pipeline.hpp"
#include "oatr/tokens.hpp"

namespace oatr {

/// Word vocabulary for the text encoder. Ids are dense from 0 and the
/// reserved tokens ([PAD]=0, [CLS]=1, [SEP]=2, [UNK]=3, [NOOBJ]=4) always
/// come first.
class Vocabulary {
 public:
  Vocabulary();

  /// Reserved tokens followed by every distinct word of `texts`, sorted.
  static Vocabulary build(std::span<const std::string> texts);
  /// One token per line; line number is the id. The first lines must be the
  /// reserved tokens.
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_words(std::span<const std::string> words);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return words_.size(); }
  TokenId id(std::string_view word) const;  // kUnk when absent
  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }
  const std::string& word(TokenId id) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  void add(const std::string& w);
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Object tag names; line number in the file is the tag id.
class TagVocabulary {
 public:
  static constexpr std::size_t kMaxTags = 1600;

  TagVocabulary() = default;
  explicit TagVocabulary(std::vector<std::string> names);
  static TagVocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return names_.size(); }
  std::optional<int> id(std::string_view name) const;
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercased words split on whitespace and punctuation. Bracketed reserved
/// names such as "[SEP]" survive as single words.
std::vector<std::string> split_words(std::string_view text);

/// [CLS] + word ids (UNK for unknown words), truncated to max_len, PAD-filled
/// to exactly max_len.
std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

/// Space-joined words, skipping PAD and CLS.
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

/// Word ids (no CLS/PAD) for each tag name, indexed by tag id.
std::vector<std::vector<TokenId>> tag_token_ids(const TagVocabulary& tags, const Vocabulary& vocab);

struct VideoSample {
  std::string video_id;
  std::vector<Image> frames;
  /// Frame entries as they appear in a manifest (paths); empty when frames
  /// were given inline.
  std::vector<std::string> frame_refs;
  std::vector<std::string> captions;
  std::vector<ObjectAnnotation> objects;

  /// Sorted distinct frame indices carrying at least one annotation.
  std::vector<int> annotated_frames() const;
  std::vector<ObjectAnnotation> objects_on(int frame_index) const;
};

enum class FrameStorage { references, inline_data };

/// JSON-lines manifest, one sample per line:
///   {"video_id": str, "frames": [path | {"shape": [H, W, C], "data": base64}],
///    "captions": [str, ...],
///    "objects": [{"frame_index": int, "box": [x1, y1, x2, y2], "tag": str, "score": num}]}
/// Relative frame paths resolve against the manifest's directory. Blank
/// lines are skipped. Violations throw ParseError naming field and line.
std::vector<VideoSample> load_manifest(const std::filesystem::path& path, const TagVocabulary& tags);

/// With FrameStorage::references, frame_refs are written as-is and the frame
/// files must be produced separately.
void write_manifest(const std::filesystem::path& path, std::span<const VideoSample> samples,
                    const TagVocabulary& tags, FrameStorage storage);

struct SamplerConfig {
  int frames_per_clip = 4;
  int image_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Centred uniform indices floor((i + 0.5) * num_frames / count); repeats
/// when num_frames < count.
std::vector<int> sample_frame_indices(int num_frames, int count);

struct Clip {
  std::vector<int> indices;
  std::vector<const Image*> frames;
};

Clip sample_frames(const VideoSample& sample, const SamplerConfig& config);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace oatr
