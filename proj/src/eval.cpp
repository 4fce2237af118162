#include "oatr/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "oatr/errors.hpp"
#include "oatr/losses.hpp"
#include "oatr/object_pipeline.hpp"
#include "oatr/trainer.hpp"

namespace oatr {

std::string_view to_string(Direction d) { return d == Direction::t2v ? "T2V" : "V2T"; }

namespace {

void check_unit_rows(const Matrix<double>& m, const char* what) {
  for (Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).norm() - 1.0) > 1e-4) {
      throw InputError(std::string("similarity_matrix: ") + what + " row " + std::to_string(r) +
                       " is not unit norm");
    }
  }
}

void check_truth(const Matrix<double>& sim, std::span<const Index> truth) {
  if (static_cast<Index>(truth.size()) != sim.rows()) {
    throw DimensionError("retrieval: " + std::to_string(truth.size()) + " ground-truth entries for " +
                         std::to_string(sim.rows()) + " queries");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= sim.cols()) {
      throw InputError("retrieval: ground truth " + std::to_string(truth[i]) + " of query " + std::to_string(i) +
                       " outside gallery of " + std::to_string(sim.cols()));
    }
  }
}

}  // namespace

Matrix<double> similarity_matrix(const Matrix<double>& queries, const Matrix<double>& gallery) {
  if (queries.cols() != gallery.cols()) {
    throw DimensionError("similarity_matrix: query dim " + std::to_string(queries.cols()) + " vs gallery dim " +
                         std::to_string(gallery.cols()));
  }
  check_unit_rows(queries, "query");
  check_unit_rows(gallery, "gallery");
  return queries * gallery.transpose();
}

std::vector<int> retrieval_ranks(const Matrix<double>& sim, std::span<const Index> truth) {
  check_truth(sim, truth);
  std::vector<int> ranks(truth.size());
  for (Index i = 0; i < sim.rows(); ++i) {
    const Index t = truth[static_cast<std::size_t>(i)];
    const double s = sim(i, t);
    int rank = 1;
    for (Index j = 0; j < sim.cols(); ++j) {
      if (sim(i, j) > s || (sim(i, j) == s && j < t)) ++rank;
    }
    ranks[static_cast<std::size_t>(i)] = rank;
  }
  return ranks;
}

double recall_at_k(const Matrix<double>& sim, std::span<const Index> truth, int k) {
  if (k < 1) throw InputError("recall_at_k: k must be >= 1");
  const auto ranks = retrieval_ranks(sim, truth);
  if (ranks.empty()) throw InputError("recall_at_k: no queries");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](int r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double median_rank(std::span<const int> ranks) {
  if (ranks.empty()) throw InputError("median_rank: no ranks");
  std::vector<int> r(ranks.begin(), ranks.end());
  std::sort(r.begin(), r.end());
  const std::size_t n = r.size();
  if (n % 2 == 1) return r[n / 2];
  return 0.5 * (r[n / 2 - 1] + r[n / 2]);
}

RetrievalReport make_report(Direction direction, Matrix<double> sim, std::span<const Index> truth) {
  RetrievalReport rep;
  rep.direction = direction;
  rep.ranks = retrieval_ranks(sim, truth);
  if (rep.ranks.empty()) throw InputError("make_report: no queries");
  auto recall = [&](int k) {
    const auto hits = std::count_if(rep.ranks.begin(), rep.ranks.end(), [k](int r) { return r <= k; });
    return static_cast<double>(hits) / static_cast<double>(rep.ranks.size());
  };
  rep.r1 = recall(1);
  rep.r5 = recall(5);
  rep.r10 = recall(10);
  rep.med_r = median_rank(rep.ranks);
  rep.similarity = std::move(sim);
  return rep;
}

nlohmann::json to_json(const RetrievalReport& r) {
  return {{"direction", std::string(to_string(r.direction))},
          {"r1", r.r1},
          {"r5", r.r5},
          {"r10", r.r10},
          {"medr", r.med_r},
          {"num_queries", r.ranks.size()}};
}

std::string format_reports(std::span<const RetrievalReport> reports) {
  std::string out = "direction    R@1    R@5   R@10   MedR  queries\n";
  char line[128];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-9s %6.1f %6.1f %6.1f %6.1f %8zu\n", std::string(to_string(r.direction)).c_str(),
                  100 * r.r1, 100 * r.r5, 100 * r.r10, r.med_r, r.ranks.size());
    out += line;
  }
  return out;
}

std::vector<TokenId> multi_sentence_query(std::span<const std::string> captions, const Vocabulary& vocab,
                                          std::size_t max_len) {
  if (captions.empty()) throw InputError("multi_sentence_query: no captions");
  std::string joined = captions[0];
  for (std::size_t i = 1; i < captions.size(); ++i) joined += " [SEP] " + captions[i];
  return tokenize(joined, vocab, max_len);
}

SplitFeatures extract_features(const DualEncoder<float>& model, std::span<const VideoSample> samples,
                               const Vocabulary& vocab, const EvalOptions& options) {
  if (samples.empty()) throw InputError("evaluation split is empty");
  if (options.batch_size == 0) throw ConfigError("eval: batch_size must be positive");
  const auto max_len = static_cast<std::size_t>(model.config().max_text_tokens);
  SamplerConfig sampler;
  sampler.frames_per_clip = options.frames_per_clip;
  const auto d = static_cast<Index>(model.config().embed_dim);
  SplitFeatures f;
  f.text.resize(static_cast<Index>(samples.size()), d);
  f.video.resize(static_cast<Index>(samples.size()), d);
  auto encode_batch = [&](std::size_t start) {
    const std::size_t end = std::min(samples.size(), start + options.batch_size);
    std::vector<std::vector<TokenId>> captions;
    std::vector<Clip> clips;
    std::vector<ClipInput> inputs;
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = samples[i];
      if (s.captions.empty()) throw InputError("sample " + s.video_id + " has no caption");
      captions.push_back(options.multi_sentence ? multi_sentence_query(s.captions, vocab, max_len)
                                                : tokenize(s.captions[0], vocab, max_len));
      clips.push_back(sample_frames(s, sampler));
      inputs.push_back({clips.back().frames});
    }
    const auto n = static_cast<Index>(end - start);
    f.text.middleRows(static_cast<Index>(start), n) = model.text_features(captions).value();
    f.video.middleRows(static_cast<Index>(start), n) = model.video_features(inputs).value();
  };
  const std::size_t batches = (samples.size() + options.batch_size - 1) / options.batch_size;
  const auto workers = static_cast<std::size_t>(std::clamp<long>(options.threads, 1, static_cast<long>(batches)));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t b; (b = next.fetch_add(1)) < batches;) {
      try {
        encode_batch(b * options.batch_size);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return f;
}

EvalResult evaluate_features(const DualEncoder<float>& model, const SplitFeatures& features) {
  using T = Tensor<float>;
  const Matrix<double> t = model.project_text(T::from_matrix(features.text)).value().cast<double>();
  const Matrix<double> v = model.project_video(T::from_matrix(features.video)).value().cast<double>();
  std::vector<Index> truth(static_cast<std::size_t>(t.rows()));
  std::iota(truth.begin(), truth.end(), Index{0});
  EvalResult r;
  r.t2v = make_report(Direction::t2v, similarity_matrix(t, v), truth);
  r.v2t = make_report(Direction::v2t, similarity_matrix(v, t), truth);
  return r;
}

EvalResult zero_shot_eval(const DualEncoder<float>& model, std::span<const VideoSample> samples,
                          const Vocabulary& vocab, const EvalOptions& options) {
  const auto before = object_pipeline_invocations();
  auto result = evaluate_features(model, extract_features(model, samples, vocab, options));
  if (object_pipeline_invocations() != before) {
    throw ContractError("zero_shot_eval: object pipeline was invoked during evaluation");
  }
  return result;
}

namespace {

bool is_head(const std::string& name) { return name.starts_with("proj_text.") || name.starts_with("proj_video."); }

std::vector<std::vector<float>> trunk_bytes(const DualEncoder<float>& model) {
  std::vector<std::vector<float>> out;
  for (const auto& p : model.parameters().entries()) {
    if (is_head(p.name)) continue;
    out.emplace_back(p.tensor.data(), p.tensor.data() + p.tensor.size());
  }
  return out;
}

Matrix<float> take_rows(const Matrix<float>& m, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(rows[i]));
  return out;
}

}  // namespace

ProbeResult linear_probe(const DualEncoder<float>& model, std::span<const VideoSample> train,
                         std::span<const VideoSample> test, const Vocabulary& vocab, const ProbeConfig& config,
                         const EvalOptions& options) {
  if (config.epochs < 0) throw ConfigError("probe: epochs must be >= 0");
  if (config.batch_size < 2) throw ConfigError("probe: batch_size must be >= 2");
  if (!(config.lr > 0)) throw ConfigError("probe: lr must be positive");
  const auto before = object_pipeline_invocations();
  const auto frozen_before = trunk_bytes(model);

  DualEncoder<float> probe = model.cast<float>();
  probe.reinit_projections(config.seed);
  std::vector<NamedParameter<float>> heads;
  for (auto& p : probe.parameters().entries()) {
    if (is_head(p.name)) {
      p.tensor.set_requires_grad(true);
      heads.push_back(p);
    }
  }

  ProbeResult result;
  if (config.epochs > 0) {
    const auto train_features = extract_features(model, train, vocab, options);
    const std::size_t n = train.size();
    const std::size_t k = std::min(n, static_cast<std::size_t>(config.batch_size));
    if (k < 2) throw InputError("probe: training split needs at least 2 videos");
    LossConfig loss;
    loss.temperature = config.temperature;
    loss.use_tag_loss = false;
    loss.use_mask_loss = false;
    AdamState adam;
    using T = Tensor<float>;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const auto order = epoch_order(config.seed, epoch, n);
      double sum = 0;
      int batches = 0;
      for (std::size_t b = 0; b + k <= n; b += k) {
        const std::span<const std::size_t> rows(order.data() + b, k);
        for (auto& h : heads) h.tensor.zero_grad();
        StreamBatch<float> s;
        s.v = probe.project_video(T::from_matrix(take_rows(train_features.video, rows)));
        s.t = probe.project_text(T::from_matrix(take_rows(train_features.text, rows)));
        const auto terms = total_loss(s, loss);
        terms.total.backward();
        adam_step(heads, adam, config.lr, AdamConfig{});
        sum += terms.total.item();
        ++batches;
      }
      result.epoch_loss.push_back(sum / batches);
    }
  }
  result.test = evaluate_features(probe, extract_features(model, test, vocab, options));

  if (trunk_bytes(probe) != frozen_before || trunk_bytes(model) != frozen_before) {
    throw ContractError("linear_probe: encoder weights changed during probing");
  }
  if (object_pipeline_invocations() != before) {
    throw ContractError("linear_probe: object pipeline was invoked during evaluation");
  }
  return result;
}

Matrix<double> attention_map(const DualEncoder<float>& model, const ClipInput& clip,
                             const std::vector<TokenId>& caption, int token_index, int layer) {
  const auto& cfg = model.config();
  if (layer < 0 || layer > cfg.num_layers) {
    throw InputError("attention_map: layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(cfg.num_layers) + "]");
  }
  const Matrix<double> text = model.text_tokens(caption, layer).value().cast<double>();
  if (token_index < 0 || token_index >= text.rows()) {
    throw InputError("attention_map: token index " + std::to_string(token_index) + " outside [0, " +
                     std::to_string(text.rows()) + ")");
  }
  const Matrix<double> tokens = model.clip_tokens(clip, layer).value().cast<double>();
  const Index frames = static_cast<Index>(clip.frames.size());
  const Index patches = cfg.patches_per_frame();
  const Vector<double> q = text.row(token_index).transpose();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  Matrix<double> w(frames, patches);
  for (Index f = 0; f < frames; ++f) {
    for (Index p = 0; p < patches; ++p) w(f, p) = scale * tokens.row(1 + f * patches + p).dot(q.transpose());
    const double top = w.row(f).maxCoeff();
    w.row(f) = (w.row(f).array() - top).exp().matrix();
    w.row(f) /= w.row(f).sum();
  }
  return w;
}

Image render_attention(const Matrix<double>& weights, const ClipInput& clip, int patch_size) {
  if (clip.frames.empty()) throw InputError("render_attention: clip has no frames");
  const Image& first = *clip.frames[0];
  const int h = first.height, w = first.width, grid_w = w / patch_size;
  Image out(h, w * static_cast<int>(clip.frames.size()), 3);
  for (std::size_t f = 0; f < clip.frames.size(); ++f) {
    const auto row = static_cast<Index>(f);
    const double top = weights.row(row).maxCoeff();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Index cell = (y / patch_size) * grid_w + x / patch_size;
        const double heat = top > 0 ? weights(row, cell) / top : 0.0;
        const double alpha = 0.6 * heat;
        for (int c = 0; c < 3; ++c) {
          const double src = clip.frames[f]->at(y, x, clip.frames[f]->channels == 1 ? 0 : c);
          const double overlay = c == 0 ? 255.0 : 0.0;
          out.at(y, static_cast<int>(f) * w + x, c) =
              static_cast<std::uint8_t>(std::lround((1 - alpha) * src + alpha * overlay));
        }
      }
    }
  }
  return out;
}

void dump_attention_map(const DualEncoder<float>& model, const ClipInput& clip,
                        const std::vector<TokenId>& caption, int token_index, int layer,
                        const std::filesystem::path& out_path) {
  const auto weights = attention_map(model, clip, caption, token_index, layer);
  write_ppm(out_path, render_attention(weights, clip, model.config().patch_size));
}

}  // namespace oatr
