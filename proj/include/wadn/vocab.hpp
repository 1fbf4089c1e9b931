#pragma once

#include <cstddef>

namespace wadn {

// Reserved token ids shared by the tokenizer and the model. Position 0 of
// every sequence holds CLS; PAD marks positions past the real content.
inline constexpr std::size_t CLS_ID = 0;
inline constexpr std::size_t PAD_ID = 1;
inline constexpr std::size_t UNK_ID = 2;
inline constexpr std::size_t NUM_SPECIALS = 3;

}  // namespace wadn
