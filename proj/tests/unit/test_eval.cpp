#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "oatr/eval.hpp"
#include "oatr/object_pipeline.hpp"
#include "oatr/synthetic.hpp"

using namespace oatr;

namespace {

// Sort-based ranking: stable order by descending score keeps smaller
// gallery indices first among ties.
std::vector<int> oracle_ranks(const Matrix<double>& sim, const std::vector<Index>& truth) {
  std::vector<int> ranks;
  for (Index i = 0; i < sim.rows(); ++i) {
    std::vector<Index> order(static_cast<std::size_t>(sim.cols()));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return sim(i, a) > sim(i, b); });
    const auto pos = std::find(order.begin(), order.end(), truth[static_cast<std::size_t>(i)]) - order.begin();
    ranks.push_back(static_cast<int>(pos) + 1);
  }
  return ranks;
}

double oracle_recall(const std::vector<int>& ranks, int k) {
  double hits = 0;
  for (int r : ranks) hits += r <= k ? 1 : 0;
  return hits / static_cast<double>(ranks.size());
}

double oracle_median(std::vector<int> r) {
  std::sort(r.begin(), r.end());
  const std::size_t n = r.size();
  return n % 2 ? r[n / 2] : (r[n / 2 - 1] + r[n / 2]) / 2.0;
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.patch_size = 8;
  c.image_size = 32;
  c.max_frames = 8;
  c.max_text_tokens = 24;
  c.shared_embed_dim = 8;
  return c;
}

SyntheticCorpus tiny_corpus(int n) {
  SynthConfig s;
  s.num_samples = n;
  s.image_size = 32;
  s.num_frames = 8;
  s.num_object_classes = 6;
  s.seed = 9;
  return generate_synthetic_corpus(s);
}

void check_same_metrics(const RetrievalReport& a, const RetrievalReport& b) {
  CHECK(a.r1 == b.r1);
  CHECK(a.r5 == b.r5);
  CHECK(a.r10 == b.r10);
  CHECK(a.med_r == b.med_r);
}

}  // namespace

TEST_CASE("similarity matrix examples") {
  const Matrix<double> eye = Matrix<double>::Identity(3, 3);
  CHECK(similarity_matrix(eye, eye) == eye);
  Matrix<double> q(1, 2);
  q << 0.6, 0.8;
  CHECK(similarity_matrix(q, -q)(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));

  Rng rng(1);
  Matrix<double> a(5, 4), g(7, 4);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  for (Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  a.rowwise().normalize();
  g.rowwise().normalize();
  const auto s = similarity_matrix(a, g);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 7; ++j) {
      double dot = 0;
      for (Index c = 0; c < 4; ++c) dot += a(i, c) * g(j, c);
      CHECK(s(i, j) == doctest::Approx(dot).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS(similarity_matrix(a, Matrix<double>::Identity(2, 3)), DimensionError);
  CHECK_THROWS_AS(similarity_matrix(2 * a, g), InputError);
}

TEST_CASE("recall and median rank examples") {
  const Matrix<double> eye = Matrix<double>::Identity(4, 4);
  const std::vector<Index> diag{0, 1, 2, 3};
  CHECK(recall_at_k(eye, diag, 1) == 1.0);

  Matrix<double> s(2, 2);
  s << 0.1, 0.9, 0.2, 0.8;
  const std::vector<Index> d2{0, 1};
  CHECK(recall_at_k(s, d2, 1) == 0.5);
  CHECK(retrieval_ranks(s, d2) == std::vector<int>{2, 1});
  CHECK(recall_at_k(s, d2, 2) == 1.0);
  CHECK(recall_at_k(s, d2, 10) == 1.0);
  CHECK_THROWS_AS(recall_at_k(s, d2, 0), InputError);
  CHECK_THROWS_AS(recall_at_k(s, std::vector<Index>{0, 2}, 1), InputError);

  // Ties go to the smaller gallery index.
  const Matrix<double> flat = Matrix<double>::Zero(1, 3);
  CHECK(retrieval_ranks(flat, std::vector<Index>{2}) == std::vector<int>{3});
  CHECK(retrieval_ranks(flat, std::vector<Index>{0}) == std::vector<int>{1});

  CHECK(median_rank(std::vector<int>{1, 3, 5}) == 3.0);
  CHECK(median_rank(std::vector<int>{1, 4}) == 2.5);
  CHECK(median_rank(std::vector<int>{1, 1, 1, 1}) == 1.0);
  CHECK_THROWS_AS(median_rank(std::vector<int>{}), InputError);
}

TEST_CASE("report metrics match a brute-force ranker") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Index q = 1 + static_cast<Index>(rng.uniform_int(50));
    const Index g = 1 + static_cast<Index>(rng.uniform_int(50));
    Matrix<double> sim(q, g);
    // Coarse values so ties are common.
    for (Index i = 0; i < sim.size(); ++i) sim.data()[i] = static_cast<double>(rng.uniform_int(7)) / 6.0;
    std::vector<Index> truth(static_cast<std::size_t>(q));
    for (auto& t : truth) t = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(g)));
    const auto expect = oracle_ranks(sim, truth);
    const auto rep = make_report(Direction::t2v, sim, truth);
    CHECK(rep.ranks == expect);
    CHECK(rep.r1 == oracle_recall(expect, 1));
    CHECK(rep.r5 == oracle_recall(expect, 5));
    CHECK(rep.r10 == oracle_recall(expect, 10));
    CHECK(rep.med_r == oracle_median(expect));
    CHECK(rep.r1 <= rep.r5);
    CHECK(rep.r5 <= rep.r10);
    for (int r : rep.ranks) {
      CHECK(r >= 1);
      CHECK(r <= g);
    }
  }
}

TEST_CASE("gallery permutation leaves metrics unchanged") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.uniform_int(30));
    Matrix<double> sim(n, n);
    for (Index i = 0; i < sim.size(); ++i) sim.data()[i] = rng.normal();
    std::vector<Index> truth(static_cast<std::size_t>(n)), perm(static_cast<std::size_t>(n));
    std::iota(truth.begin(), truth.end(), Index{0});
    std::iota(perm.begin(), perm.end(), Index{0});
    rng.shuffle(std::span<Index>(perm));
    Matrix<double> shuffled(n, n);
    std::vector<Index> remapped(truth.size());
    for (Index j = 0; j < n; ++j) shuffled.col(perm[static_cast<std::size_t>(j)]) = sim.col(j);
    for (std::size_t i = 0; i < truth.size(); ++i) remapped[i] = perm[static_cast<std::size_t>(truth[i])];
    check_same_metrics(make_report(Direction::t2v, sim, truth), make_report(Direction::t2v, shuffled, remapped));
  }
}

TEST_CASE("report json and table") {
  const Matrix<double> eye = Matrix<double>::Identity(3, 3);
  const auto rep = make_report(Direction::v2t, eye, std::vector<Index>{0, 1, 2});
  const auto j = to_json(rep);
  CHECK(j.at("direction") == "V2T");
  CHECK(j.at("r1") == 1.0);
  CHECK(j.at("medr") == 1.0);
  CHECK(j.at("num_queries") == 3);
  const std::vector<RetrievalReport> reps{rep};
  CHECK(format_reports(reps).find("V2T") != std::string::npos);
}

TEST_CASE("multi-sentence queries") {
  const std::vector<std::string> texts{"a red ball", "the ball rolls"};
  const auto vocab = Vocabulary::build(texts);
  const std::vector<std::string> one{"a red ball"};
  CHECK(multi_sentence_query(one, vocab, 12) == tokenize("a red ball", vocab, 12));
  const auto both = multi_sentence_query(texts, vocab, 12);
  const std::vector<TokenId> expect{tokens::kCls, vocab.id("a"),    vocab.id("red"),   vocab.id("ball"),
                                    tokens::kSep, vocab.id("the"),  vocab.id("ball"),  vocab.id("rolls"),
                                    tokens::kPad, tokens::kPad,     tokens::kPad,      tokens::kPad};
  CHECK(both == expect);
  CHECK(multi_sentence_query(texts, vocab, 5).size() == 5);
  CHECK(multi_sentence_query(texts, vocab, 5)[4] == tokens::kSep);
}

TEST_CASE("zero-shot evaluation is pure and order independent") {
  const auto corpus = tiny_corpus(12);
  const DualEncoder<float> model(tiny_encoder(), corpus.vocab.size(), 4);
  const EvalOptions opts;
  const auto before = object_pipeline_invocations();
  const auto r = zero_shot_eval(model, corpus.samples, corpus.vocab, opts);
  CHECK(object_pipeline_invocations() == before);
  CHECK(r.t2v.ranks.size() == 12);
  CHECK(r.v2t.similarity.isApprox(r.t2v.similarity.transpose()));

  auto stripped = corpus.samples;
  for (auto& s : stripped) s.objects.clear();
  const auto r2 = zero_shot_eval(model, stripped, corpus.vocab, opts);
  CHECK(r2.t2v.similarity == r.t2v.similarity);

  auto shuffled = corpus.samples;
  Rng rng(5);
  rng.shuffle(std::span<VideoSample>(shuffled));
  const auto r3 = zero_shot_eval(model, shuffled, corpus.vocab, opts);
  check_same_metrics(r.t2v, r3.t2v);
  check_same_metrics(r.v2t, r3.v2t);

  EvalOptions threaded = opts;
  threaded.threads = 3;
  threaded.batch_size = 5;
  const auto r4 = zero_shot_eval(model, corpus.samples, corpus.vocab, threaded);
  threaded.threads = 1;
  CHECK(zero_shot_eval(model, corpus.samples, corpus.vocab, threaded).t2v.similarity == r4.t2v.similarity);
  // Batch size changes kernel blocking, so only rounding may differ.
  CHECK((r4.t2v.similarity - r.t2v.similarity).cwiseAbs().maxCoeff() < 1e-5);

  CHECK_THROWS_AS(zero_shot_eval(model, std::span<const VideoSample>{}, corpus.vocab, opts), InputError);
}

TEST_CASE("linear probe trains only the heads") {
  const auto corpus = tiny_corpus(12);
  const DualEncoder<float> model(tiny_encoder(), corpus.vocab.size(), 6);
  const std::span<const VideoSample> train(corpus.samples.data(), 8), test(corpus.samples.data() + 8, 4);
  ProbeConfig cfg;
  cfg.seed = 21;
  cfg.batch_size = 4;
  const EvalOptions opts;

  cfg.epochs = 0;
  const auto zero = linear_probe(model, train, test, corpus.vocab, cfg, opts);
  auto fresh = model.cast<float>();
  fresh.reinit_projections(cfg.seed);
  const auto direct = zero_shot_eval(fresh, test, corpus.vocab, opts);
  CHECK(zero.test.t2v.similarity == direct.t2v.similarity);
  check_same_metrics(zero.test.t2v, direct.t2v);

  const auto before = model.state();
  cfg.epochs = 3;
  const auto trained = linear_probe(model, train, test, corpus.vocab, cfg, opts);
  CHECK(trained.epoch_loss.size() == 3);
  for (double l : trained.epoch_loss) CHECK(std::isfinite(l));
  CHECK(trained.epoch_loss.back() < trained.epoch_loss.front());
  const auto after = model.state();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].values == after[i].values);
  CHECK_FALSE(trained.test.t2v.similarity == zero.test.t2v.similarity);
}

TEST_CASE("attention maps") {
  const auto corpus = tiny_corpus(2);
  const auto cfg = tiny_encoder();
  const DualEncoder<float> model(cfg, corpus.vocab.size(), 7);
  SamplerConfig sampler;
  sampler.frames_per_clip = 4;
  const auto clip = sample_frames(corpus.samples[0], sampler);
  const ClipInput input{clip.frames};
  const auto caption = tokenize(corpus.samples[0].captions[0], corpus.vocab, 24);

  const auto w = attention_map(model, input, caption, 2);
  CHECK(w.rows() == 4);
  CHECK(w.cols() == 16);
  for (Index f = 0; f < w.rows(); ++f) CHECK(w.row(f).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(attention_map(model, input, caption, 40), InputError);

  const Image gray(32, 32, 3, 128);
  const ClipInput uniform{{&gray, &gray}};
  const auto u = attention_map(model, uniform, caption, 1);
  CHECK(u.maxCoeff() - u.minCoeff() < 0.05);

  const auto path = std::filesystem::temp_directory_path() / "oatr_attention.ppm";
  dump_attention_map(model, input, caption, 2, 1, path);
  const auto img = read_ppm(path);
  CHECK(img.height == 32);
  CHECK(img.width == 4 * 32);
}
