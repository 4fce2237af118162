#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "oatr/data.hpp"
#include "oatr/encoders.hpp"

namespace oatr {

enum class Direction { t2v, v2t };

std::string_view to_string(Direction d);

struct RetrievalReport {
  Direction direction = Direction::t2v;
  Matrix<double> similarity;  // queries x gallery
  std::vector<int> ranks;     // 1-based, per query
  double r1 = 0;
  double r5 = 0;
  double r10 = 0;
  double med_r = 0;
};

/// Dot products of unit rows; throws InputError for rows off the unit sphere.
Matrix<double> similarity_matrix(const Matrix<double>& queries, const Matrix<double>& gallery);

/// Rank of each query's true item: 1 + items scoring higher + equal-scoring
/// items with a smaller gallery index.
std::vector<int> retrieval_ranks(const Matrix<double>& sim, std::span<const Index> truth);

double recall_at_k(const Matrix<double>& sim, std::span<const Index> truth, int k);

/// Middle order statistic; mean of the two middle values for even counts.
double median_rank(std::span<const int> ranks);

RetrievalReport make_report(Direction direction, Matrix<double> sim, std::span<const Index> truth);

/// {direction, r1, r5, r10, medr, num_queries}
nlohmann::json to_json(const RetrievalReport& r);

/// Fixed-width table, one line per report.
std::string format_reports(std::span<const RetrievalReport> reports);

/// Captions joined with [SEP] and tokenized as one query.
std::vector<TokenId> multi_sentence_query(std::span<const std::string> captions, const Vocabulary& vocab,
                                          std::size_t max_len);

struct EvalOptions {
  int frames_per_clip = 8;
  /// Query with all captions of a video instead of the first one.
  bool multi_sentence = false;
  std::size_t batch_size = 16;
  /// Worker threads encoding batches; results do not depend on it. The batch
  /// size can move results by float rounding.
  int threads = 1;
};

/// Pre-projection features of a split: one caption query and one clip per video.
struct SplitFeatures {
  Matrix<float> text;
  Matrix<float> video;
};

SplitFeatures extract_features(const DualEncoder<float>& model, std::span<const VideoSample> samples,
                               const Vocabulary& vocab, const EvalOptions& options);

struct EvalResult {
  RetrievalReport t2v;
  RetrievalReport v2t;
};

/// Projects features through the model heads; video i matches caption i.
EvalResult evaluate_features(const DualEncoder<float>& model, const SplitFeatures& features);

/// Retrieval on a split without any training. Only the caption and raw clip
/// pathways run; throws ContractError if the object pipeline is entered.
EvalResult zero_shot_eval(const DualEncoder<float>& model, std::span<const VideoSample> samples,
                          const Vocabulary& vocab, const EvalOptions& options);

struct ProbeConfig {
  int epochs = 10;
  double lr = 1e-3;
  int batch_size = 32;
  double temperature = 0.05;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  EvalResult test;
  std::vector<double> epoch_loss;
};

/// Freezes both encoders, reinitializes the projection heads from
/// config.seed and trains only them with the matching loss on `train`.
ProbeResult linear_probe(const DualEncoder<float>& model, std::span<const VideoSample> train,
                         std::span<const VideoSample> test, const Vocabulary& vocab, const ProbeConfig& config,
                         const EvalOptions& options);

/// Softmax-normalized attention of one text token over each frame's patches
/// (frames x patches_per_frame), both taken after `layer` blocks.
Matrix<double> attention_map(const DualEncoder<float>& model, const ClipInput& clip,
                             const std::vector<TokenId>& caption, int token_index, int layer = 1);

/// Frames side by side with the per-frame weights as a red overlay.
Image render_attention(const Matrix<double>& weights, const ClipInput& clip, int patch_size);

void dump_attention_map(const DualEncoder<float>& model, const ClipInput& clip,
                        const std::vector<TokenId>& caption, int token_index, int layer,
                        const std::filesystem::path& out_path);

}  // namespace oatr
