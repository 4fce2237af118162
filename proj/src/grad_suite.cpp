#include "oatr/grad_suite.hpp"

#include <algorithm>
#include <functional>

#include "oatr/encoders.hpp"
#include "oatr/grad_check.hpp"
#include "oatr/losses.hpp"
#include "oatr/ops.hpp"
#include "oatr/rng.hpp"

namespace oatr {

namespace {

using T = Tensor<double>;

T random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  auto [r, c] = storage_dims(shape);
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return T::leaf(std::move(shape), std::move(m), true);
}

// Weighted sum with fixed random weights, so every output coordinate matters.
T probe(const T& y, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<double> w(y.rows(), y.cols());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  return sum(mul(y, T::leaf(y.shape(), w)));
}

Index rand_extent(Rng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
}

// Each case draws its shapes and inputs from the shape rng, and any index
// choices the op needs from the op rng, so the op can be replayed on the
// same leaves while grad_check perturbs them.
struct Case {
  const char* name;
  std::function<std::vector<T>(Rng&)> inputs;
  std::function<T(const std::vector<T>&, Rng&)> apply;
};

std::vector<Case> op_cases() {
  auto pair_same = [](Rng& r) {
    Index m = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
    return std::vector<T>{random_tensor(r, {m, n}), random_tensor(r, {m, n})};
  };
  auto single = [](Rng& r) {
    return std::vector<T>{random_tensor(r, {rand_extent(r, 1, 5), rand_extent(r, 1, 5)})};
  };
  return {
      {"add", pair_same, [](const auto& in, Rng&) { return add(in[0], in[1]); }},
      {"add_broadcast",
       [](Rng& r) {
         Index m = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
         return std::vector<T>{random_tensor(r, {m, n}), random_tensor(r, {n})};
       },
       [](const auto& in, Rng&) { return add(in[0], in[1]); }},
      {"sub", pair_same, [](const auto& in, Rng&) { return sub(in[0], in[1]); }},
      {"mul", pair_same, [](const auto& in, Rng&) { return mul(in[0], in[1]); }},
      {"scale_by",
       [](Rng& r) {
         return std::vector<T>{random_tensor(r, {rand_extent(r, 1, 5), rand_extent(r, 1, 5)}),
                               random_tensor(r, {})};
       },
       [](const auto& in, Rng&) { return scale_by(in[0], in[1]); }},
      {"matmul",
       [](Rng& r) {
         Index m = rand_extent(r, 1, 5), k = rand_extent(r, 1, 5), n = rand_extent(r, 1, 5);
         return std::vector<T>{random_tensor(r, {m, k}), random_tensor(r, {k, n})};
       },
       [](const auto& in, Rng&) { return matmul(in[0], in[1]); }},
      {"transpose", single, [](const auto& in, Rng&) { return transpose(in[0]); }},
      {"reshape",
       [](Rng& r) {
         return std::vector<T>{random_tensor(r, {rand_extent(r, 1, 4), rand_extent(r, 1, 4), 2})};
       },
       [](const auto& in, Rng&) { return reshape(in[0], {2 * in[0].extent(1), in[0].extent(0)}); }},
      {"concat_rows",
       [](Rng& r) {
         Index n = rand_extent(r, 1, 4);
         return std::vector<T>{random_tensor(r, {rand_extent(r, 1, 3), n}),
                               random_tensor(r, {rand_extent(r, 1, 3), n})};
       },
       [](const auto& in, Rng&) { return concat(in, 0); }},
      {"concat_cols",
       [](Rng& r) {
         Index n = rand_extent(r, 1, 4);
         return std::vector<T>{random_tensor(r, {n, rand_extent(r, 1, 3)}),
                               random_tensor(r, {n, rand_extent(r, 1, 3)})};
       },
       [](const auto& in, Rng&) { return concat(in, 1); }},
      {"slice", single,
       [](const auto& in, Rng& r) {
         Index m = in[0].extent(0), n = in[0].extent(1);
         Index r0 = rand_extent(r, 0, m - 1), c0 = rand_extent(r, 0, n - 1);
         return slice(in[0], r0, rand_extent(r, 1, m - r0), c0, rand_extent(r, 1, n - c0));
       }},
      {"gather_rows", single,
       [](const auto& in, Rng& r) {
         std::vector<Index> idx;
         Index count = rand_extent(r, 1, 8);
         for (Index i = 0; i < count; ++i) idx.push_back(rand_extent(r, 0, in[0].extent(0) - 1));
         return gather_rows(in[0], idx);
       }},
      {"pick", single,
       [](const auto& in, Rng& r) {
         std::vector<Index> idx;
         for (Index i = 0; i < in[0].extent(0); ++i) idx.push_back(rand_extent(r, 0, in[0].extent(1) - 1));
         return pick(in[0], idx);
       }},
      {"sum", single, [](const auto& in, Rng&) { return sum(in[0]); }},
      {"mean", single, [](const auto& in, Rng&) { return mean(in[0]); }},
      {"mean_rows", single, [](const auto& in, Rng&) { return mean_rows(in[0]); }},
      {"gelu",
       [](Rng& r) {
         return std::vector<T>{random_tensor(r, {rand_extent(r, 1, 5), rand_extent(r, 1, 5)}, 2.0)};
       },
       [](const auto& in, Rng&) { return gelu(in[0]); }},
      {"layer_norm",
       [](Rng& r) {
         Index n = rand_extent(r, 2, 8);
         return std::vector<T>{random_tensor(r, {rand_extent(r, 1, 4), n}), random_tensor(r, {n}),
                               random_tensor(r, {n})};
       },
       [](const auto& in, Rng&) { return layer_norm(in[0], in[1], in[2]); }},
      {"softmax",
       [](Rng& r) {
         return std::vector<T>{
             random_tensor(r, {rand_extent(r, 1, 3), rand_extent(r, 1, 3), rand_extent(r, 2, 4)})};
       },
       [](const auto& in, Rng& r) { return softmax(in[0], static_cast<Index>(r.uniform_int(3))); }},
      {"log_softmax", single,
       [](const auto& in, Rng& r) { return log_softmax(in[0], static_cast<Index>(r.uniform_int(2))); }},
      {"l2_normalize", single, [](const auto& in, Rng&) { return l2_normalize(in[0]); }},
      {"attention",
       [](Rng& r) {
         Index n = rand_extent(r, 1, 5), m = rand_extent(r, 1, 5), d = rand_extent(r, 1, 4);
         return std::vector<T>{random_tensor(r, {n, d}), random_tensor(r, {m, d}),
                               random_tensor(r, {m, d})};
       },
       [](const auto& in, Rng& r) {
         const Index n = in[0].extent(0), m = in[1].extent(0);
         BoolMatrix allowed(n, m);
         for (Index i = 0; i < n; ++i) {
           for (Index j = 0; j < m; ++j) allowed(i, j) = r.bernoulli(0.6);
           allowed(i, static_cast<Index>(r.uniform_int(static_cast<std::uint64_t>(m)))) = true;
         }
         return scaled_dot_product_attention(in[0], in[1], in[2], &allowed);
       }},
      {"multi_head_attention",
       [](Rng& r) {
         Index rows = rand_extent(r, 2, 7), d = 2 * rand_extent(r, 1, 3);
         return std::vector<T>{random_tensor(r, {rows, d}), random_tensor(r, {rows, d}),
                               random_tensor(r, {rows, d})};
       },
       [](const auto& in, Rng& r) {
         AttentionGroups groups;
         const Index rows = in[0].extent(0);
         Index used = 0;
         while (used < rows) {
           const Index n = rand_extent(r, 1, rows - used);
           BoolMatrix mask;
           if (r.bernoulli(0.5)) {
             mask.resize(n, n);
             for (Index i = 0; i < n; ++i) {
               for (Index j = 0; j < n; ++j) mask(i, j) = r.bernoulli(0.5);
               mask(i, i) = true;
             }
           }
           groups.add(n, mask);
           used += n;
         }
         return multi_head_attention(in[0], in[1], in[2], 2, groups);
       }},
  };
}

}  // namespace

std::vector<GradSuiteEntry> run_op_grad_suite(int trials, std::uint64_t seed) {
  std::vector<GradSuiteEntry> out;
  for (const auto& c : op_cases()) {
    GradSuiteEntry e;
    e.name = c.name;
    for (int trial = 0; trial < trials; ++trial) {
      const auto t = static_cast<std::uint64_t>(trial);
      Rng shape_rng(Rng::derive(seed, {0, t}));
      auto inputs = c.inputs(shape_rng);
      const auto op_seed = Rng::derive(seed, {1, t});
      const auto report = grad_check(
          [&] {
            Rng op_rng(op_seed);
            return probe(c.apply(inputs, op_rng), Rng::derive(seed, {2, t}));
          },
          inputs);
      e.max_rel_error = std::max(e.max_rel_error, report.max_rel_error);
      e.coordinates += report.coordinates;
    }
    out.push_back(e);
  }
  return out;
}

GradSuiteEntry run_objective_grad_check(std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.patch_size = 4;
  cfg.image_size = 8;
  cfg.max_frames = 2;
  cfg.max_text_tokens = 6;
  cfg.shared_embed_dim = 4;
  const std::size_t vocab = 10;
  DualEncoder<double> model(cfg, vocab, seed);
  // Larger weights than the default init so every path carries signal.
  Rng rng(Rng::derive(seed, {1}));
  for (auto& p : model.parameters().entries()) {
    auto& w = p.tensor.mutable_value();
    for (Index i = 0; i < w.size(); ++i) w.data()[i] += 0.3 * rng.normal();
  }
  std::vector<Image> frames;
  for (int f = 0; f < 4; ++f) {
    Image img(cfg.image_size, cfg.image_size, 3);
    for (auto& px : img.pixels) px = static_cast<std::uint8_t>(rng.uniform_int(256));
    frames.push_back(std::move(img));
  }
  const std::vector<ClipInput> clips{{{&frames[0], &frames[1]}}, {{&frames[2], &frames[3]}}};
  KeepGrid keep0(2, 2), keep1(2, 2);
  keep0 << true, false, true, true;
  keep1 << false, true, false, false;
  const std::vector<AnchorInput> anchors{{&frames[1], keep0, 1}, {&frames[2], keep1, 0}};
  const std::vector<std::vector<TokenId>> captions{{1, 5, 6, 7, 0, 0}, {1, 8, 9, 0, 0, 0}};
  const std::vector<std::vector<TokenId>> tags{{1, 5, 2, 9, 0, 0}, {1, 4, 0, 0, 0, 0}};
  LossConfig loss;
  loss.temperature = 0.5;

  std::vector<T> params;
  for (auto& p : model.parameters().entries()) params.push_back(p.tensor);
  const auto report = grad_check(
      [&] {
        StreamBatch<double> b{model.encode_video(clips), model.encode_text(captions),
                              model.encode_masked_anchor(anchors), model.encode_tags(tags)};
        return total_loss(b, loss).total;
      },
      params);
  return {"objective", report.max_rel_error, report.coordinates};
}

}  // namespace oatr
