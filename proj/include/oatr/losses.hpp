#pragma once

#include <cmath>
#include <string>

#include "oatr/encoders.hpp"
#include "oatr/errors.hpp"
#include "oatr/ops.hpp"

namespace oatr {

struct LossConfig {
  double temperature = 0.05;
  double lambda = 0.5;
  bool use_tag_loss = true;
  bool use_mask_loss = true;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("loss: temperature must be > 0");
    if (!(lambda >= 0)) throw ConfigError("loss: lambda must be >= 0");
  }
};

inline constexpr double kUnitNormTolerance = 1e-4;

namespace detail {

template <typename Scalar>
void require_unit_rows(const Tensor<Scalar>& x, const char* what) {
  for (Index r = 0; r < x.rows(); ++r) {
    const double n = static_cast<double>(x.value().row(r).norm());
    if (std::abs(n - 1.0) > kUnitNormTolerance) {
      throw InputError(std::string("info_nce: ") + what + " row " + std::to_string(r) + " has norm " +
                       std::to_string(n));
    }
  }
}

}  // namespace detail

/// Mean over i of -log softmax_j(<q_i, k_j> / tau) at j = i.
template <typename Scalar>
Tensor<Scalar> info_nce(const Tensor<Scalar>& queries, const Tensor<Scalar>& keys, double temperature) {
  if (queries.rank() != 2 || queries.shape() != keys.shape()) {
    throw DimensionError("info_nce: queries " + shape_string(queries.shape()) + " vs keys " +
                         shape_string(keys.shape()));
  }
  if (queries.rows() < 2) throw InputError("info_nce: need at least 2 pairs, got " + std::to_string(queries.rows()));
  if (!(temperature > 0)) throw ConfigError("info_nce: temperature must be > 0");
  detail::require_unit_rows(queries, "query");
  detail::require_unit_rows(keys, "key");
  const auto logits = scale(matmul(queries, transpose(keys)), static_cast<Scalar>(1.0 / temperature));
  std::vector<Index> diagonal(static_cast<std::size_t>(queries.rows()));
  for (Index i = 0; i < queries.rows(); ++i) diagonal[static_cast<std::size_t>(i)] = i;
  return scale(mean(pick(log_softmax(logits, 1), diagonal)), Scalar(-1));
}

template <typename Scalar>
Tensor<Scalar> matching_loss(const StreamBatch<Scalar>& batch, const LossConfig& config) {
  return add(info_nce(batch.v, batch.t, config.temperature), info_nce(batch.t, batch.v, config.temperature));
}

/// Tag stream against the raw-video embeddings of the batch.
template <typename Scalar>
Tensor<Scalar> tag_loss(const StreamBatch<Scalar>& batch, const LossConfig& config) {
  return info_nce(batch.t_l, batch.v, config.temperature);
}

/// Masked anchor against the caption embeddings of the batch.
template <typename Scalar>
Tensor<Scalar> mask_loss(const StreamBatch<Scalar>& batch, const LossConfig& config) {
  return info_nce(batch.v_l, batch.t, config.temperature);
}

template <typename Scalar>
struct LossTerms {
  Tensor<Scalar> total;
  Tensor<Scalar> matching;
  Tensor<Scalar> tag;   // undefined when disabled
  Tensor<Scalar> mask;  // undefined when disabled
};

/// matching + lambda · (tag + mask), with each object-aware term switchable.
template <typename Scalar>
LossTerms<Scalar> total_loss(const StreamBatch<Scalar>& batch, const LossConfig& config) {
  config.validate();
  LossTerms<Scalar> out;
  out.matching = matching_loss(batch, config);
  out.total = out.matching;
  if (config.use_tag_loss) {
    if (!batch.t_l.defined()) throw ContractError("total_loss: tag loss enabled but no tag stream");
    out.tag = tag_loss(batch, config);
  }
  if (config.use_mask_loss) {
    if (!batch.v_l.defined()) throw ContractError("total_loss: mask loss enabled but no masked anchor stream");
    out.mask = mask_loss(batch, config);
  }
  Tensor<Scalar> oac;
  if (out.tag.defined()) oac = out.tag;
  if (out.mask.defined()) oac = oac.defined() ? add(oac, out.mask) : out.mask;
  if (oac.defined()) out.total = add(out.matching, scale(oac, static_cast<Scalar>(config.lambda)));
  return out;
}

}  // namespace oatr
