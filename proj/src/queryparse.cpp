#include "weakground/queryparse.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <random>
#include <sstream>

#include "weakground/numcore.hpp"

namespace wg {

std::vector<std::string> tokenize(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) clean.push_back(static_cast<char>(std::tolower(ch)));
    else if (std::isspace(ch)) clean.push_back(' ');
    else if (ch == '\'' || ch == '`') continue;
    else clean.push_back(' ');
  }
  std::istringstream in(clean);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

namespace {

bool matches_at(const std::vector<std::string>& tokens, std::size_t pos, const std::vector<std::string>& pattern) {
  if (pattern.empty() || pos + pattern.size() > tokens.size()) return false;
  return std::equal(pattern.begin(), pattern.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos));
}

struct RelationPattern {
  RelationId relation;
  std::vector<std::string> words;
};

const std::vector<RelationPattern>& relation_patterns() {
  static const std::vector<RelationPattern> patterns = [] {
    std::vector<RelationPattern> p;
    for (RelationId rel : kRelationLibrary)
      for (std::string_view phrase : relation_phrases(rel)) p.push_back({rel, tokenize(std::string(phrase))});
    // longest first so "to the left of" wins over "left of"
    std::stable_sort(p.begin(), p.end(),
                     [](const RelationPattern& a, const RelationPattern& b) { return a.words.size() > b.words.size(); });
    return p;
  }();
  return patterns;
}

std::optional<RelationId> find_relation(const std::vector<std::string>& tokens, std::size_t from, std::size_t to) {
  for (std::size_t pos = from; pos < to; ++pos)
    for (const auto& pat : relation_patterns())
      if (pos + pat.words.size() <= to && matches_at(tokens, pos, pat.words)) return pat.relation;
  return std::nullopt;
}

}  // namespace

ParsedQuery parse(const std::string& text, const CategoryVocab& vocab, const ParseOptions& opts) {
  ParsedQuery q;
  q.tokens = tokenize(text);

  std::vector<std::vector<std::string>> names;
  for (const auto& n : vocab.names) names.push_back(tokenize(n));

  for (std::size_t pos = 0; pos < q.tokens.size();) {
    std::optional<std::size_t> best;
    for (std::size_t c = 0; c < names.size(); ++c)
      if (matches_at(q.tokens, pos, names[c]) && (!best || names[c].size() > names[*best].size())) best = c;
    if (!best) {
      ++pos;
      continue;
    }
    const std::size_t end = pos + names[*best].size();
    if (q.noun_phrases.size() < kMaxNounPhrases)
      q.noun_phrases.push_back({vocab.names[*best], pos, end, *best});
    else
      ++q.dropped_phrases;
    pos = end;
  }
  if (q.noun_phrases.empty()) throw ParseError("parse: no known noun phrase in '" + text + "'");

  for (std::size_t i = 0; i + 1 < q.noun_phrases.size(); ++i)
    if (auto rel = find_relation(q.tokens, q.noun_phrases[i].end, q.noun_phrases[i + 1].begin))
      q.relation_triples.push_back({*rel, i, i + 1});

  if (opts.target_keep_prob < 1.0 && vocab.size() > 1) {
    std::seed_seq seq(text.begin(), text.end());
    std::mt19937_64 rng(opts.seed ^ std::mt19937_64(seq)());
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= opts.target_keep_prob) {
      auto& target = q.noun_phrases[q.target];
      const std::size_t shift = std::uniform_int_distribution<std::size_t>(1, vocab.size() - 1)(rng);
      target.category = (*target.category + shift) % vocab.size();
      target.surface = vocab.names[*target.category];
    }
  }
  return q;
}

ParsedQuery substitute_target(const ParsedQuery& parsed, const CategoryVocab& vocab, std::size_t category) {
  const NounPhrase& t = parsed.target_phrase();
  const std::vector<std::string> words = tokenize(vocab.names.at(category));
  const std::ptrdiff_t delta = static_cast<std::ptrdiff_t>(words.size()) - static_cast<std::ptrdiff_t>(t.end - t.begin);

  ParsedQuery out = parsed;
  out.tokens.clear();
  out.tokens.insert(out.tokens.end(), parsed.tokens.begin(), parsed.tokens.begin() + static_cast<std::ptrdiff_t>(t.begin));
  out.tokens.insert(out.tokens.end(), words.begin(), words.end());
  out.tokens.insert(out.tokens.end(), parsed.tokens.begin() + static_cast<std::ptrdiff_t>(t.end), parsed.tokens.end());
  for (auto& np : out.noun_phrases) {
    if (np.begin >= t.end) {
      np.begin = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(np.begin) + delta);
      np.end = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(np.end) + delta);
    }
  }
  auto& nt = out.noun_phrases[out.target];
  nt.end = nt.begin + words.size();
  nt.surface = vocab.names[category];
  nt.category = category;
  return out;
}

NegativeQuerySet generate_negatives(const ParsedQuery& parsed, const CategoryVocab& vocab,
                                    const std::vector<std::vector<double>>& phrase_embeddings, std::size_t k) {
  if (phrase_embeddings.size() != vocab.size())
    throw ContractError("generate_negatives: one phrase embedding per category required");
  NegativeQuerySet set;
  set.requested = k;
  if (k == 0) return set;
  const auto target = parsed.target_phrase().category;
  if (!target) throw ContractError("generate_negatives: target phrase has no category");

  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t c = 0; c < vocab.size(); ++c)
    if (c != *target) ranked.emplace_back(cosine_sim(phrase_embeddings[*target], phrase_embeddings[c]), c);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  ranked.resize(std::min(k, ranked.size()));
  for (const auto& [score, c] : ranked) {
    set.replacements.push_back(c);
    set.parsed.push_back(substitute_target(parsed, vocab, c));
    set.queries.push_back(join_tokens(set.parsed.back().tokens));
  }
  return set;
}

}  // namespace wg
