#pragma once

// Dual encoders: a text transformer and a video transformer with divided
// space-time attention, plus linear projection heads into a shared space.
//
// Visual token layout per sample: row 0 is CLS, then one row per patch,
// frame-major (frame f, patch p at row 1 + f·P + p). Patches dropped by an
// anchor keep-grid are simply absent from the sequence.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "oatr/checkpoint.hpp"
#include "oatr/errors.hpp"
#include "oatr/image.hpp"
#include "oatr/object_pipeline.hpp"
#include "oatr/ops.hpp"
#include "oatr/rng.hpp"
#include "oatr/tokens.hpp"

namespace oatr {

struct EncoderConfig {
  int embed_dim = 128;
  int num_layers = 4;
  int num_heads = 4;
  int mlp_ratio = 4;
  int patch_size = 16;
  int image_size = 64;
  int max_frames = 8;
  int max_text_tokens = 32;
  int shared_embed_dim = 128;
  int channels = 3;

  void validate() const {
    for (int v : {embed_dim, num_layers, num_heads, mlp_ratio, patch_size, image_size, max_frames,
                  max_text_tokens, shared_embed_dim, channels}) {
      if (v < 1) throw ConfigError("encoder config: all sizes must be >= 1");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("encoder config: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("encoder config: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    }
  }
  int grid() const { return image_size / patch_size; }
  int patches_per_frame() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
};

/// The four normalized embedding blocks of a batch, K x shared_embed_dim
/// each. Streams that a configuration does not use are left undefined.
template <typename Scalar>
struct StreamBatch {
  Tensor<Scalar> v;
  Tensor<Scalar> t;
  Tensor<Scalar> v_l;
  Tensor<Scalar> t_l;
};

struct ClipInput {
  std::vector<const Image*> frames;
};

struct AnchorInput {
  const Image* frame = nullptr;
  KeepGrid keep;
  int temporal_index = 0;
};

template <typename Scalar>
struct NamedParameter {
  std::string name;
  Tensor<Scalar> tensor;
};

/// Named leaves in creation order.
template <typename Scalar>
class ParameterSet {
 public:
  Tensor<Scalar>& add(std::string name, Shape shape, Matrix<Scalar> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), Tensor<Scalar>::leaf(std::move(shape), std::move(value))});
    return entries_.back().tensor;
  }
  const Tensor<Scalar>& at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("no parameter named " + std::string(name));
    return entries_[it->second].tensor;
  }
  Tensor<Scalar>& at(std::string_view name) {
    return const_cast<Tensor<Scalar>&>(static_cast<const ParameterSet&>(*this).at(name));
  }
  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }
  std::vector<NamedParameter<Scalar>>& entries() { return entries_; }
  const std::vector<NamedParameter<Scalar>>& entries() const { return entries_; }
  Index numel() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

 private:
  std::vector<NamedParameter<Scalar>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename Scalar>
class DualEncoder {
 public:
  using T = Tensor<Scalar>;
  using Mat = Matrix<Scalar>;

  static constexpr double kInitStd = 0.02;

  enum class Pooling { cls, mean_patches };
  /// `attention` runs masked temporal attention; `identity` is the
  /// closed form for single-frame inputs (each token attends only to itself).
  enum class Temporal { attention, identity };

  DualEncoder() = default;

  DualEncoder(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed)
      : config_(config), vocab_size_(vocab_size) {
    config_.validate();
    if (vocab_size < tokens::kReservedNames.size()) {
      throw ConfigError("encoder: vocabulary smaller than the reserved tokens");
    }
    Rng rng(seed);
    const Index d = config_.embed_dim;
    const Index h = static_cast<Index>(config_.mlp_ratio) * d;
    auto normal = [&](std::string name, Index rows, Index cols, Shape shape) {
      Matrix<double> m(rows, cols);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.truncated_normal(kInitStd);
      params_.add(std::move(name), std::move(shape), m.cast<Scalar>());
    };
    auto constant = [&](std::string name, Index n, Scalar value) {
      params_.add(std::move(name), {n}, Mat::Constant(1, n, value));
    };
    auto linear = [&](const std::string& name, Index in, Index out) {
      normal(name + ".weight", in, out, {in, out});
      constant(name + ".bias", out, 0);
    };
    auto norm = [&](const std::string& name) {
      constant(name + ".gain", d, 1);
      constant(name + ".bias", d, 0);
    };
    auto attention = [&](const std::string& name) {
      for (const char* part : {".q", ".k", ".v", ".out"}) linear(name + part, d, d);
    };
    auto mlp = [&](const std::string& name) {
      linear(name + ".fc1", d, h);
      linear(name + ".fc2", h, d);
    };

    const auto vocab = static_cast<Index>(vocab_size);
    normal("text.token_embed", vocab, d, {vocab, d});
    normal("text.pos_embed", config_.max_text_tokens, d, {config_.max_text_tokens, d});
    for (int l = 0; l < config_.num_layers; ++l) {
      const std::string b = "text.blocks." + std::to_string(l);
      norm(b + ".ln_attn");
      attention(b + ".attn");
      norm(b + ".ln_mlp");
      mlp(b + ".mlp");
    }
    norm("text.ln_final");

    linear("video.patch_embed", config_.patch_dim(), d);
    normal("video.cls_token", 1, d, {1, d});
    normal("video.pos_spatial", config_.patches_per_frame(), d, {config_.patches_per_frame(), d});
    normal("video.pos_temporal", config_.max_frames, d, {config_.max_frames, d});
    for (int l = 0; l < config_.num_layers; ++l) {
      const std::string b = "video.blocks." + std::to_string(l);
      norm(b + ".ln_time");
      attention(b + ".attn_time");
      norm(b + ".ln_space");
      attention(b + ".attn_space");
      norm(b + ".ln_mlp");
      mlp(b + ".mlp");
    }
    norm("video.ln_final");

    linear("proj_text", d, config_.shared_embed_dim);
    linear("proj_video", d, config_.shared_embed_dim);
  }

  const EncoderConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_size_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  void set_requires_grad(bool on) {
    for (auto& p : params_.entries()) p.tensor.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& p : params_.entries()) p.tensor.zero_grad();
  }

  template <typename Other>
  DualEncoder<Other> cast() const {
    DualEncoder<Other> out;
    out.config_ = config_;
    out.vocab_size_ = vocab_size_;
    for (const auto& p : params_.entries()) {
      out.params_.add(p.name, p.tensor.shape(), p.tensor.value().template cast<Other>());
    }
    return out;
  }

  std::vector<NamedArray> state() const {
    std::vector<NamedArray> out;
    for (const auto& p : params_.entries()) out.push_back(to_named_array(p.name, p.tensor));
    return out;
  }

  /// Assigns every parameter from `arrays`; extra entries are ignored.
  void load_state(std::span<const NamedArray> arrays) {
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (auto& p : params_.entries()) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw ParseError("checkpoint is missing parameter " + p.name);
      assign_from(p.tensor, *it->second);
    }
  }

  /// Fresh projection heads drawn from `seed`; encoder trunks untouched.
  void reinit_projections(std::uint64_t seed) {
    Rng rng(seed);
    for (const char* name : {"proj_text", "proj_video"}) {
      auto& w = params_.at(std::string(name) + ".weight").mutable_value();
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.truncated_normal(kInitStd));
      params_.at(std::string(name) + ".bias").mutable_value().setZero();
    }
  }

  // -- text ----------------------------------------------------------------

  /// Pooled CLS features (K x embed_dim) before projection. Trailing PAD
  /// tokens are trimmed from each sequence.
  T text_features(std::span<const std::vector<TokenId>> batch) const {
    std::vector<Index> cls_rows;
    const T x = text_states(batch, config_.num_layers, cls_rows);
    return gather_rows(norm("text.ln_final", x), cls_rows);
  }

  /// Token states (one row per non-PAD token) of one sequence after
  /// `num_layers` blocks, without the final norm.
  T text_tokens(const std::vector<TokenId>& seq, int num_layers) const {
    std::vector<Index> cls_rows;
    return text_states(std::span<const std::vector<TokenId>>(&seq, 1), num_layers, cls_rows);
  }

  T project_text(const T& features) const { return l2_normalize(linear("proj_text", features)); }

  T encode_text(std::span<const std::vector<TokenId>> batch) const {
    return project_text(text_features(batch));
  }

  /// Tag streams share every text-encoder weight.
  T encode_tags(std::span<const std::vector<TokenId>> batch) const { return encode_text(batch); }

  // -- vision --------------------------------------------------------------

  T video_features(std::span<const ClipInput> batch) const {
    std::vector<Sequence> seqs;
    for (const auto& clip : batch) {
      if (clip.frames.empty()) throw InputError("encode_video: clip has no frames");
      if (static_cast<int>(clip.frames.size()) > config_.max_frames) {
        throw DimensionError("encode_video: " + std::to_string(clip.frames.size()) +
                             " frames exceed max_frames " + std::to_string(config_.max_frames));
      }
      Sequence s;
      for (std::size_t f = 0; f < clip.frames.size(); ++f) {
        for (int p = 0; p < config_.patches_per_frame(); ++p) {
          s.push(clip.frames[f], static_cast<Index>(f), p);
        }
      }
      seqs.push_back(std::move(s));
    }
    return visual_features(seqs, Temporal::attention, config_.num_layers);
  }

  T project_video(const T& features) const { return l2_normalize(linear("proj_video", features)); }

  T encode_video(std::span<const ClipInput> batch) const { return project_video(video_features(batch)); }

  /// Mean of the kept patch tokens of a single frame; masked patches are
  /// not in the sequence, so they are neither attended to nor pooled.
  T anchor_features(std::span<const AnchorInput> batch) const {
    std::vector<Sequence> seqs;
    for (const auto& a : batch) {
      if (a.frame == nullptr) throw InputError("encode_masked_anchor: missing frame");
      if (a.keep.rows() != config_.grid() || a.keep.cols() != config_.grid()) {
        throw DimensionError("encode_masked_anchor: keep grid " + std::to_string(a.keep.rows()) + "x" +
                             std::to_string(a.keep.cols()) + ", expected " +
                             std::to_string(config_.grid()) + "x" + std::to_string(config_.grid()));
      }
      if (!a.keep.any()) throw InputError("encode_masked_anchor: no kept patches");
      if (a.temporal_index < 0 || a.temporal_index >= config_.max_frames) {
        throw InputError("encode_masked_anchor: temporal index " + std::to_string(a.temporal_index) +
                         " outside [0, " + std::to_string(config_.max_frames) + ")");
      }
      Sequence s;
      s.pooling = Pooling::mean_patches;
      for (int p = 0; p < config_.patches_per_frame(); ++p) {
        if (a.keep(p / config_.grid(), p % config_.grid())) s.push(a.frame, a.temporal_index, p);
      }
      seqs.push_back(std::move(s));
    }
    return visual_features(seqs, Temporal::identity, config_.num_layers);
  }

  T encode_masked_anchor(std::span<const AnchorInput> batch) const {
    return project_video(anchor_features(batch));
  }

  /// Single frames through the image path (closed-form temporal step).
  T image_features(std::span<const Image* const> frames, Pooling pooling) const {
    std::vector<Sequence> seqs;
    for (const Image* f : frames) {
      Sequence s;
      s.pooling = pooling;
      for (int p = 0; p < config_.patches_per_frame(); ++p) s.push(f, 0, p);
      seqs.push_back(std::move(s));
    }
    return visual_features(seqs, Temporal::identity, config_.num_layers);
  }

  /// Token states (1 + L·P rows) of one clip after `num_layers` blocks,
  /// without the final norm.
  T clip_tokens(const ClipInput& clip, int num_layers) const {
    Sequence s;
    for (std::size_t f = 0; f < clip.frames.size(); ++f) {
      for (int p = 0; p < config_.patches_per_frame(); ++p) s.push(clip.frames[f], static_cast<Index>(f), p);
    }
    std::vector<Sequence> seqs{std::move(s)};
    return visual_tokens(seqs, Temporal::attention, num_layers);
  }

  /// Flattened patch pixels, scaled to [-1, 1], ordered (y, x, channel).
  Vector<Scalar> patch_pixels(const Image& frame, int patch) const {
    check_frame(frame);
    const int ps = config_.patch_size;
    const int gy = patch / config_.grid(), gx = patch % config_.grid();
    Vector<Scalar> out(config_.patch_dim());
    Index i = 0;
    for (int y = 0; y < ps; ++y) {
      for (int x = 0; x < ps; ++x) {
        for (int c = 0; c < config_.channels; ++c) {
          out(i++) = static_cast<Scalar>(frame.at(gy * ps + y, gx * ps + x, c)) / Scalar(127.5) - Scalar(1);
        }
      }
    }
    return out;
  }

 private:
  template <typename>
  friend class DualEncoder;

  struct Sequence {
    std::vector<const Image*> frame;  // per patch token
    std::vector<Index> temporal;
    std::vector<Index> spatial;
    Pooling pooling = Pooling::cls;

    void push(const Image* f, Index t, Index p) {
      frame.push_back(f);
      temporal.push_back(t);
      spatial.push_back(p);
    }
    Index rows() const { return 1 + static_cast<Index>(spatial.size()); }
  };

  void check_frame(const Image& frame) const {
    if (frame.height != config_.image_size || frame.width != config_.image_size ||
        frame.channels != config_.channels) {
      throw DimensionError("frame is " + std::to_string(frame.height) + "x" + std::to_string(frame.width) +
                           "x" + std::to_string(frame.channels) + ", encoder expects " +
                           std::to_string(config_.image_size) + "x" + std::to_string(config_.image_size) +
                           "x" + std::to_string(config_.channels));
    }
  }

  T linear(const std::string& name, const T& x) const {
    return add(matmul(x, params_.at(name + ".weight")), params_.at(name + ".bias"));
  }
  T norm(const std::string& name, const T& x) const {
    return layer_norm(x, params_.at(name + ".gain"), params_.at(name + ".bias"));
  }
  T text_states(std::span<const std::vector<TokenId>> batch, int num_layers, std::vector<Index>& cls_rows) const {
    if (batch.empty()) throw InputError("encode_text: empty batch");
    std::vector<Index> ids, positions;
    AttentionGroups groups;
    for (const auto& seq : batch) {
      std::size_t n = seq.size();
      while (n > 1 && seq[n - 1] == tokens::kPad) --n;
      if (n == 0) throw InputError("encode_text: empty token sequence");
      if (n > static_cast<std::size_t>(config_.max_text_tokens)) {
        throw InputError("encode_text: " + std::to_string(n) + " tokens exceed max_text_tokens " +
                         std::to_string(config_.max_text_tokens));
      }
      cls_rows.push_back(groups.total_rows());
      for (std::size_t i = 0; i < n; ++i) {
        if (seq[i] < 0 || static_cast<std::size_t>(seq[i]) >= vocab_size_) {
          throw InputError("encode_text: token id " + std::to_string(seq[i]) +
                           " outside vocabulary of " + std::to_string(vocab_size_));
        }
        ids.push_back(seq[i]);
        positions.push_back(static_cast<Index>(i));
      }
      groups.add(static_cast<Index>(n));
    }
    T x = add(gather_rows(params_.at("text.token_embed"), ids),
              gather_rows(params_.at("text.pos_embed"), positions));
    for (int l = 0; l < num_layers; ++l) {
      const std::string b = "text.blocks." + std::to_string(l);
      x = add(x, attention(b + ".attn", norm(b + ".ln_attn", x), groups));
      x = add(x, mlp(b + ".mlp", norm(b + ".ln_mlp", x)));
    }
    return x;
  }

  T mlp(const std::string& name, const T& x) const {
    return linear(name + ".fc2", gelu(linear(name + ".fc1", x)));
  }
  T attention(const std::string& name, const T& x, const AttentionGroups& groups) const {
    return linear(name + ".out", multi_head_attention(linear(name + ".q", x), linear(name + ".k", x),
                                                      linear(name + ".v", x), config_.num_heads, groups));
  }

  T visual_tokens(const std::vector<Sequence>& seqs, Temporal temporal, int num_layers) const {
    if (seqs.empty()) throw InputError("visual encoder: empty batch");
    Index total_patches = 0;
    for (const auto& s : seqs) total_patches += s.rows() - 1;
    Mat pixels(total_patches, config_.patch_dim());
    std::vector<Index> spatial, temporal_idx, table_rows;
    AttentionGroups time_groups, space_groups;
    Index r = 0;
    for (const auto& s : seqs) {
      const Index n = s.rows();
      table_rows.push_back(0);  // CLS
      for (std::size_t i = 0; i < s.spatial.size(); ++i) {
        pixels.row(r) = patch_pixels(*s.frame[i], static_cast<int>(s.spatial[i])).transpose();
        table_rows.push_back(1 + r);
        ++r;
      }
      spatial.insert(spatial.end(), s.spatial.begin(), s.spatial.end());
      temporal_idx.insert(temporal_idx.end(), s.temporal.begin(), s.temporal.end());
      if (temporal == Temporal::identity) {
        for (std::size_t i = 1; i < s.temporal.size(); ++i) {
          if (s.temporal[i] != s.temporal[0]) {
            throw ContractError("visual encoder: identity temporal step needs single-frame input");
          }
        }
      }
      // Temporal: same spatial position across frames; CLS only itself.
      // Spatial: same frame plus CLS; CLS sees everything.
      BoolMatrix time_mask = BoolMatrix::Constant(n, n, false);
      BoolMatrix space_mask = BoolMatrix::Constant(n, n, false);
      time_mask(0, 0) = true;
      space_mask.row(0).setConstant(true);
      for (Index i = 1; i < n; ++i) {
        space_mask(i, 0) = true;
        for (Index j = 1; j < n; ++j) {
          const auto a = static_cast<std::size_t>(i - 1), b = static_cast<std::size_t>(j - 1);
          time_mask(i, j) = s.spatial[a] == s.spatial[b];
          space_mask(i, j) = s.temporal[a] == s.temporal[b];
        }
      }
      time_groups.add(n, std::move(time_mask));
      space_groups.add(n, std::move(space_mask));
    }
    const T patches = add(add(linear("video.patch_embed", T::from_matrix(std::move(pixels))),
                              gather_rows(params_.at("video.pos_spatial"), spatial)),
                          gather_rows(params_.at("video.pos_temporal"), temporal_idx));
    T x = gather_rows(concat(std::vector<T>{params_.at("video.cls_token"), patches}, 0), table_rows);
    for (int l = 0; l < num_layers; ++l) {
      const std::string b = "video.blocks." + std::to_string(l);
      if (temporal == Temporal::attention) {
        x = add(x, attention(b + ".attn_time", norm(b + ".ln_time", x), time_groups));
      } else {
        x = add(x, linear(b + ".attn_time.out", linear(b + ".attn_time.v", norm(b + ".ln_time", x))));
      }
      x = add(x, attention(b + ".attn_space", norm(b + ".ln_space", x), space_groups));
      x = add(x, mlp(b + ".mlp", norm(b + ".ln_mlp", x)));
    }
    return x;
  }

  T visual_features(const std::vector<Sequence>& seqs, Temporal temporal, int num_layers) const {
    const T x = norm("video.ln_final", visual_tokens(seqs, temporal, num_layers));
    Mat pool = Mat::Zero(static_cast<Index>(seqs.size()), x.rows());
    Index offset = 0;
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      const Index n = seqs[k].rows();
      const auto row = static_cast<Index>(k);
      if (seqs[k].pooling == Pooling::cls) {
        pool(row, offset) = 1;
      } else {
        pool.block(row, offset + 1, 1, n - 1).setConstant(Scalar(1) / static_cast<Scalar>(n - 1));
      }
      offset += n;
    }
    return matmul(T::from_matrix(std::move(pool)), x);
  }

  EncoderConfig config_;
  std::size_t vocab_size_ = 0;
  ParameterSet<Scalar> params_;
};

}  // namespace oatr
