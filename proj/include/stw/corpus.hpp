#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stw/permutation.hpp"
#include "stw/rng.hpp"

namespace stw {

enum class CorpusMode { StatePrediction, NextToken, Parity, NaturalLanguage };

std::string to_string(CorpusMode mode);
CorpusMode corpus_mode_from_string(const std::string& s);

struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  // The n! permutation strings in lexicographic order, then the parity tokens
  // "0" and "1". This is the shared vocabulary for all group-token corpora.
  static Vocab for_group(int degree);
  static Vocab from_tokens(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens.size()); }
  int id(const std::string& tok) const;           // throws if absent
  int find(const std::string& tok) const;         // -1 if absent
  const std::string& token(int id) const;

  bool operator==(const Vocab& o) const { return tokens == o.tokens; }
};

struct Document {
  std::vector<int> input_ids;
  std::vector<int> target_ids;  // aligned with input_ids; -1 where no loss is taken

  int length() const { return static_cast<int>(input_ids.size()); }
};

struct Corpus {
  Vocab vocab;
  CorpusMode mode = CorpusMode::StatePrediction;
  int group_degree = 0;
  std::vector<Document> docs;
  std::map<std::string, std::string> meta;  // provenance: generator, seed, ...

  int size() const { return static_cast<int>(docs.size()); }
};

// `count` distinct uniform action sequences with per-position cumulative-state
// targets. Throws if uniqueness is infeasible or the retry budget runs out.
Corpus gen_word_corpus(int degree, int count, int length, uint64_t seed);

// Disjoint partition with sizes floor(f*N) / remainder, shuffled by seed.
std::pair<Corpus, Corpus> split_corpus(const Corpus& c, double train_fraction, uint64_t seed);

struct TopicModelParams {
  int n_topics = 0;
  double alpha = 0.0;                           // document-topic Dirichlet concentration
  std::vector<std::string> tokens;              // column order of token_topic
  std::vector<std::vector<double>> token_topic; // rows = topics, p(token | topic)

  void validate() const;  // rows sum to 1 within 1e-3, alpha > 0
  // Built-in presets "appG1" and "appG2" (4 topics over the six S3 tokens).
  static TopicModelParams preset(const std::string& name);
};

Corpus gen_topic_corpus(const TopicModelParams& params, int count, int length, uint64_t seed);

// I.i.d. uniform group tokens with next-token targets.
Corpus gen_uniform_corpus(int degree, int count, int length, uint64_t seed);

// State-prediction targets replaced by the parity token of each cumulative
// state; mode becomes Parity. Throws if c is not in state-prediction mode.
Corpus parity_targets(const Corpus& c);

// ---- natural-language rendering ---------------------------------------------

struct PhraseMap {
  std::map<std::string, std::string> phrase_for;  // perm display string -> phrase

  static PhraseMap default_s3();
  const std::string& at(const Perm& p) const;  // throws on unmapped action
};

// Word-level vocabulary for natural-language mode: the group vocabulary plus
// every phrase word and the sentence terminator ".".
Vocab nl_vocab(const PhraseMap& pm, int degree);

// One sentence per action, each ending in "."; the target at each "." is the
// cumulative state reached after that action.
Document render_natural_language(std::span<const Perm> actions, const PhraseMap& pm,
                                 const Vocab& vocab);

// Inverse of render_natural_language; throws on unparseable token streams.
std::vector<Perm> parse_natural_language(const Document& doc, const PhraseMap& pm,
                                         const Vocab& vocab);

Corpus gen_nl_corpus(int count, int n_actions, uint64_t seed);

// ---- serialization -----------------------------------------------------------
//
// Line-oriented text format:
//   #vocab: tok1 tok2 ...
//   #mode: state-prediction
//   #meta: key=value ...
//   tok tok tok | 0:target 1:target ...
void save_corpus(const Corpus& c, const std::string& path);
Corpus load_corpus(const std::string& path);  // reports the offending line on error

}  // namespace stw
