#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "weakground/geometry.hpp"
#include "weakground/synthworld.hpp"

namespace wg {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxNounPhrases = 16;

struct NounPhrase {
  std::string surface;
  std::size_t begin = 0;  // token span [begin, end)
  std::size_t end = 0;
  std::optional<std::size_t> category;
};

struct RelationTriple {
  RelationId relation;
  std::size_t subject = 0;  // indices into noun_phrases
  std::size_t anchor = 0;

  bool operator==(const RelationTriple&) const = default;
};

struct ParsedQuery {
  std::vector<std::string> tokens;
  std::vector<NounPhrase> noun_phrases;
  std::size_t target = 0;  // index of the target phrase in noun_phrases
  std::vector<RelationTriple> relation_triples;
  std::size_t dropped_phrases = 0;  // spans beyond the cap

  const NounPhrase& target_phrase() const { return noun_phrases.at(target); }
};

/// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize(const std::string& text);

struct ParseOptions {
  /// Probability that the target phrase keeps its category; below 1 the
  /// category is swapped for a random other one (deterministic per text+seed).
  double target_keep_prob = 1.0;
  std::uint64_t seed = 0;
};

/// Noun phrases are longest vocabulary matches; the first is the target.
/// Throws ParseError when no vocabulary phrase occurs.
ParsedQuery parse(const std::string& text, const CategoryVocab& vocab, const ParseOptions& opts = {});

/// Same query with the target span replaced by `category`'s name.
ParsedQuery substitute_target(const ParsedQuery& parsed, const CategoryVocab& vocab, std::size_t category);

std::string join_tokens(const std::vector<std::string>& tokens);

struct NegativeQuerySet {
  std::vector<std::string> queries;
  std::vector<ParsedQuery> parsed;
  std::vector<std::size_t> replacements;  // category per negative, most similar first
  std::size_t requested = 0;
};

/// Top-k categories by cosine similarity of `phrase_embeddings` to the
/// target's, excluding the target category. Ties go to the lower index.
NegativeQuerySet generate_negatives(const ParsedQuery& parsed, const CategoryVocab& vocab,
                                    const std::vector<std::vector<double>>& phrase_embeddings, std::size_t k);

}  // namespace wg
