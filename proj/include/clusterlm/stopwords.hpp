#pragma once

// Bundled English stop-word lexicon. Callers may replace it with any list
// loaded from a file; matching is exact (no case folding).

#include <string>
#include <vector>

namespace clusterlm::embed {

inline const std::vector<std::string>& default_stopwords() {
  static const std::vector<std::string> words = {
      "a",       "about",   "above",   "after",   "again",   "against",
      "all",     "am",      "an",      "and",     "any",     "are",
      "as",      "at",      "be",      "because", "been",    "before",
      "being",   "below",   "between", "both",    "but",     "by",
      "can",     "could",   "did",     "do",      "does",    "doing",
      "down",    "during",  "each",    "few",     "for",     "from",
      "further", "had",     "has",     "have",    "having",  "he",
      "her",     "here",    "hers",    "him",     "his",     "how",
      "i",       "if",      "in",      "into",    "is",      "it",
      "its",     "just",    "me",      "more",    "most",    "my",
      "no",      "nor",     "not",     "now",     "of",      "off",
      "on",      "once",    "only",    "or",      "other",   "our",
      "ours",    "out",     "over",    "own",     "same",    "she",
      "should",  "so",      "some",    "such",    "than",    "that",
      "the",     "their",   "theirs",  "them",    "then",    "there",
      "these",   "they",    "this",    "those",   "through", "to",
      "too",     "under",   "until",   "up",      "very",    "was",
      "we",      "were",    "what",    "when",    "where",   "which",
      "while",   "who",     "whom",    "why",     "will",    "with",
      "would",   "you",     "your",    "yours"};
  return words;
}

}  // namespace clusterlm::embed
