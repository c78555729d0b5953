#pragma once

#include <cstdint>
#include <string>

namespace cmoe {

// Knobs for the synthetic text distribution. Lower zipf_offset skews word
// frequencies harder; the sentence bounds shape punctuation density. Two
// different styles make a controlled train/eval distribution shift.
struct TextStyle {
  double zipf_offset = 2.7;
  int sentence_min_words = 4;
  int sentence_word_span = 10;
};

// Deterministic English-like filler text: zipf-weighted common words composed
// into sentences and paragraphs. Structured enough for a byte model to beat
// the order-0 entropy by a wide margin, with no external assets.
std::string generate_text(uint64_t seed, size_t n_bytes, const TextStyle& style = {});

}  // namespace cmoe
