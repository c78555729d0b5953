#include "cmoe/textgen.hpp"

#include <array>
#include <vector>

#include "cmoe/rng.hpp"

namespace cmoe {

namespace {

constexpr std::array<const char*, 182> kWords = {
    "the",      "of",      "and",      "to",       "a",        "in",      "is",      "it",
    "that",     "was",     "for",      "on",       "are",      "with",    "as",      "at",
    "be",       "this",    "have",     "from",     "or",       "one",     "had",     "by",
    "word",     "but",     "not",      "what",     "all",      "were",    "when",    "we",
    "there",    "can",     "an",       "which",    "their",    "said",    "if",      "will",
    "each",     "about",   "how",      "up",       "out",      "them",    "then",    "she",
    "many",     "some",    "so",       "these",    "would",    "other",   "into",    "has",
    "more",     "two",     "like",     "him",      "see",      "time",    "could",   "no",
    "make",     "than",    "first",    "been",     "its",      "who",     "now",     "people",
    "my",       "made",    "over",     "did",      "down",     "only",    "way",     "find",
    "use",      "may",     "water",    "long",     "little",   "very",    "after",   "words",
    "called",   "just",    "where",    "most",     "know",     "get",     "through", "back",
    "much",     "before",  "good",     "new",      "write",    "our",     "me",      "man",
    "too",      "any",     "day",      "same",     "right",    "look",    "think",   "also",
    "around",   "another", "came",     "come",     "work",     "three",   "must",    "because",
    "does",     "part",    "even",     "place",    "well",     "such",    "here",    "take",
    "why",      "things",  "help",     "put",      "years",    "different", "away",  "again",
    "off",      "went",    "old",      "number",   "great",    "tell",    "men",     "say",
    "small",    "every",   "found",    "still",    "between",  "name",    "should",  "home",
    "big",      "give",    "air",      "line",     "set",      "own",     "under",   "read",
    "last",     "never",   "us",       "left",     "end",      "along",   "while",   "might",
    "next",     "sound",   "below",    "saw",      "something", "thought", "both",   "few",
    "those",    "always",  "show",     "large",    "often",    "together"};

}  // namespace

std::string generate_text(uint64_t seed, size_t n_bytes, const TextStyle& style) {
  Rng rng(seed);
  // zipf-ish weights over the rank-ordered word list
  std::vector<double> cumulative;
  double total = 0.0;
  for (size_t i = 0; i < kWords.size(); ++i) {
    total += 1.0 / (static_cast<double>(i) + style.zipf_offset);
    cumulative.push_back(total);
  }
  auto draw_word = [&]() -> const char* {
    const double u = rng.uniform() * total;
    size_t lo = 0, hi = cumulative.size() - 1;
    while (lo < hi) {
      const size_t mid = (lo + hi) / 2;
      if (cumulative[mid] < u)
        lo = mid + 1;
      else
        hi = mid;
    }
    return kWords[lo];
  };

  std::string out;
  out.reserve(n_bytes + 64);
  while (out.size() < n_bytes) {
    const int sentences = 3 + static_cast<int>(rng.below(5));
    for (int s = 0; s < sentences && out.size() < n_bytes; ++s) {
      const int words = style.sentence_min_words +
                        static_cast<int>(rng.below(static_cast<uint64_t>(style.sentence_word_span)));
      for (int w = 0; w < words; ++w) {
        std::string word = draw_word();
        if (w == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
        out += word;
        if (w + 1 < words) {
          if (w > 1 && rng.bernoulli(0.08)) out += ',';
          out += ' ';
        }
      }
      out += rng.bernoulli(0.1) ? "? " : ". ";
    }
    out += "\n\n";
  }
  out.resize(n_bytes);
  return out;
}

}  // namespace cmoe
