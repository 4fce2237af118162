#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "oatr/data.hpp"

namespace oatr {

/// Compositional glyph videos: each object class is a (shape, colour) pair
/// named by a noun, captions list the nouns present plus the shared motion
/// direction, and annotations are exact glyph boxes on every frame.
struct SynthConfig {
  int num_samples = 256;
  int num_object_classes = 12;
  int image_size = 64;
  int num_frames = 8;
  int min_objects = 1;
  int max_objects = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Split { train, val, test };

/// 80/10/10 by FNV-1a hash of the video id.
Split split_of(const std::string& video_id);
std::string_view to_string(Split split);

struct SyntheticCorpus {
  std::vector<VideoSample> samples;
  TagVocabulary tags;
  Vocabulary vocab;

  std::vector<VideoSample> split(Split which) const;
};

/// Maximum number of classes the generator can name.
std::size_t synthetic_class_limit();

/// Colour of the glyph for a class; no background pixel ever equals it.
std::array<std::uint8_t, 3> synthetic_class_color(int class_id);

SyntheticCorpus generate_synthetic_corpus(const SynthConfig& config);

/// Writes frames/<video_id>_<k>.ppm, train/val/test.jsonl, tags.txt and
/// vocab.txt under `dir`.
void write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& corpus);

}  // namespace oatr
