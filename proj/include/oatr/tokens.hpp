#pragma once

#include <array>
#include <string_view>

#include "oatr/tensor.hpp"

namespace oatr {

using TokenId = Index;

/// Reserved text-vocabulary ids. Every Vocabulary places these first.
namespace tokens {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kCls = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNoObj = 4;
inline constexpr std::array<std::string_view, 5> kReservedNames = {"[PAD]", "[CLS]", "[SEP]", "[UNK]",
                                                                   "[NOOBJ]"};
}  // namespace tokens

}  // namespace oatr
