#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "oatr/tensor.hpp"

namespace oatr {

/// One named array as stored on disk.
struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::vector<float> values;
};

inline constexpr char kCheckpointMagic[4] = {'O', 'A', 'T', 'R'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout, all integers little-endian:
///   "OATR" | u32 version | u64 count |
///   count x ( u64 name_len | name bytes (UTF-8) | u64 rank | rank x u64 extent |
///             numel x f32 )
/// The file is written to a temporary sibling and renamed into place, so an
/// interrupted write never replaces a previous good checkpoint.
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
NamedArray to_named_array(const std::string& name, const Tensor<Scalar>& t) {
  NamedArray a;
  a.name = name;
  for (Index e : t.shape()) a.extents.push_back(static_cast<std::uint64_t>(e));
  a.values.resize(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) a.values[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
  return a;
}

/// Copies stored values into an existing leaf of identical shape.
template <typename Scalar>
void assign_from(Tensor<Scalar>& t, const NamedArray& a) {
  Shape shape;
  for (auto e : a.extents) shape.push_back(static_cast<Index>(e));
  if (shape != t.shape()) {
    throw DimensionError("checkpoint entry '" + a.name + "' has shape " + shape_string(shape) +
                         ", expected " + shape_string(t.shape()));
  }
  auto& v = t.mutable_value();
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(a.values[static_cast<std::size_t>(i)]);
}

}  // namespace oatr
