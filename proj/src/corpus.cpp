#include "stw/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace stw {

std::string to_string(CorpusMode mode) {
  switch (mode) {
    case CorpusMode::StatePrediction: return "state-prediction";
    case CorpusMode::NextToken: return "next-token";
    case CorpusMode::Parity: return "parity";
    case CorpusMode::NaturalLanguage: return "natural-language";
  }
  throw std::logic_error("unknown corpus mode");
}

CorpusMode corpus_mode_from_string(const std::string& s) {
  if (s == "state-prediction") return CorpusMode::StatePrediction;
  if (s == "next-token") return CorpusMode::NextToken;
  if (s == "parity") return CorpusMode::Parity;
  if (s == "natural-language") return CorpusMode::NaturalLanguage;
  throw std::invalid_argument("unknown corpus mode: " + s);
}

Vocab Vocab::for_group(int degree) {
  std::vector<std::string> toks;
  for (const Perm& p : enumerate_group(degree)) toks.push_back(p.str());
  toks.push_back("0");
  toks.push_back("1");
  return from_tokens(std::move(toks));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  v.tokens = std::move(tokens);
  for (size_t i = 0; i < v.tokens.size(); ++i) {
    if (!v.index.emplace(v.tokens[i], static_cast<int>(i)).second)
      throw std::invalid_argument("Vocab: duplicate token " + v.tokens[i]);
  }
  return v;
}

int Vocab::id(const std::string& tok) const {
  auto it = index.find(tok);
  if (it == index.end()) throw std::invalid_argument("Vocab: unknown token " + tok);
  return it->second;
}

int Vocab::find(const std::string& tok) const {
  auto it = index.find(tok);
  return it == index.end() ? -1 : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocab: token id out of range");
  return tokens[static_cast<size_t>(id)];
}

namespace {

std::string ids_key(const std::vector<int>& ids) {
  std::string key;
  key.reserve(ids.size() * 3);
  for (int id : ids) {
    key += std::to_string(id);
    key += ',';
  }
  return key;
}

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

}  // namespace

Corpus gen_word_corpus(int degree, int count, int length, uint64_t seed) {
  if (count < 1 || length < 1) throw std::invalid_argument("gen_word_corpus: count and length must be positive");
  // Uniqueness feasibility: count <= (n!)^length, compared in log space.
  if (std::log(static_cast<double>(count)) > length * std::log(factorial(degree)) + 1e-9)
    throw std::invalid_argument("gen_word_corpus: uniqueness infeasible for requested count");

  Corpus c;
  c.vocab = Vocab::for_group(degree);
  c.mode = CorpusMode::StatePrediction;
  c.group_degree = degree;
  c.meta = {{"generator", "word"},
            {"group", std::to_string(degree)},
            {"count", std::to_string(count)},
            {"length", std::to_string(length)},
            {"seed", std::to_string(seed)}};

  auto group = enumerate_group(degree);
  Rng rng = Rng::derive(seed, /*stream=*/1);
  std::unordered_set<std::string> seen;
  const long long budget = 100LL * count;
  long long attempts = 0;
  while (c.size() < count) {
    if (++attempts > budget)
      throw std::runtime_error("gen_word_corpus: rejection-sampling retry budget exceeded");
    std::vector<Perm> actions;
    actions.reserve(static_cast<size_t>(length));
    std::vector<int> ids(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t) {
      int k = static_cast<int>(rng.below(group.size()));
      actions.push_back(group[static_cast<size_t>(k)]);
      ids[static_cast<size_t>(t)] = k;  // group enumeration order == vocab order
    }
    if (!seen.insert(ids_key(ids)).second) continue;
    Document doc;
    doc.input_ids = std::move(ids);
    doc.target_ids.reserve(static_cast<size_t>(length));
    for (const Perm& s : cumulative_states(actions)) doc.target_ids.push_back(c.vocab.id(s.str()));
    c.docs.push_back(std::move(doc));
  }
  return c;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& c, double train_fraction, uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split_corpus: train_fraction must lie in (0, 1)");
  const int n = c.size();
  const int n_train = static_cast<int>(std::floor(train_fraction * n));
  if (n_train == 0 || n_train == n) throw std::invalid_argument("split_corpus: a side would be empty");

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng = Rng::derive(seed, /*stream=*/2);
  rng.shuffle(order);

  Corpus train = c, eval = c;
  train.docs.clear();
  eval.docs.clear();
  for (int i = 0; i < n; ++i) {
    const Document& d = c.docs[static_cast<size_t>(order[static_cast<size_t>(i)])];
    (i < n_train ? train : eval).docs.push_back(d);
  }
  train.meta["split"] = "train";
  eval.meta["split"] = "eval";
  return {std::move(train), std::move(eval)};
}

void TopicModelParams::validate() const {
  if (n_topics < 1 || alpha <= 0.0) throw std::invalid_argument("TopicModelParams: need n_topics >= 1 and alpha > 0");
  if (static_cast<int>(token_topic.size()) != n_topics)
    throw std::invalid_argument("TopicModelParams: row count != n_topics");
  for (const auto& row : token_topic) {
    if (row.size() != tokens.size()) throw std::invalid_argument("TopicModelParams: row width != token count");
    double sum = 0.0;
    for (double p : row) {
      if (p < 0.0) throw std::invalid_argument("TopicModelParams: negative probability");
      sum += p;
    }
    // The printed matrices carry rounding, so rows only sum to 1 within 1e-3.
    if (std::abs(sum - 1.0) > 1e-3) throw std::invalid_argument("TopicModelParams: row does not sum to 1");
  }
}

TopicModelParams TopicModelParams::preset(const std::string& name) {
  TopicModelParams p;
  p.n_topics = 4;
  p.alpha = 0.3;
  p.tokens = {"123", "132", "213", "231", "312", "321"};
  if (name == "appG1") {
    p.token_topic = {
        {3.06e-2, 1.11e-1, 5.79e-4, 6.45e-3, 6.58e-3, 8.45e-1},
        {3.36e-1, 1.69e-4, 6.63e-1, 8.05e-7, 1.68e-7, 7.81e-4},
        {7.92e-5, 1.41e-2, 9.44e-1, 4.53e-4, 4.13e-2, 3.27e-11},
        {2.85e-3, 1.29e-9, 7.06e-1, 6.37e-7, 2.58e-3, 2.89e-1},
    };
  } else if (name == "appG2") {
    p.token_topic = {
        {9.31e-1, 2.32e-3, 1.38e-8, 5.86e-10, 4.62e-5, 6.63e-2},
        {2.10e-4, 3.12e-4, 9.32e-7, 9.07e-6, 2.53e-1, 7.47e-1},
        {4.95e-1, 1.18e-3, 4.55e-1, 2.17e-2, 1.86e-8, 2.71e-2},
        {6.55e-1, 4.92e-4, 3.44e-1, 2.28e-7, 1.94e-4, 2.14e-8},
    };
  } else {
    throw std::invalid_argument("TopicModelParams: unknown preset " + name);
  }
  p.validate();
  return p;
}

Corpus gen_topic_corpus(const TopicModelParams& params, int count, int length, uint64_t seed) {
  params.validate();
  if (count < 1 || length < 1) throw std::invalid_argument("gen_topic_corpus: count and length must be positive");

  // Normalized per-topic CDFs; printed matrices are only row-normalized to 1e-3.
  std::vector<std::vector<double>> cdf(static_cast<size_t>(params.n_topics));
  for (int k = 0; k < params.n_topics; ++k) {
    const auto& row = params.token_topic[static_cast<size_t>(k)];
    double sum = 0.0;
    for (double p : row) sum += p;
    double acc = 0.0;
    for (double p : row) {
      acc += p / sum;
      cdf[static_cast<size_t>(k)].push_back(acc);
    }
    cdf[static_cast<size_t>(k)].back() = 1.0;
  }

  int degree = static_cast<int>(params.tokens[0].size());
  Corpus c;
  c.vocab = Vocab::for_group(degree);
  c.mode = CorpusMode::NextToken;
  c.group_degree = degree;
  c.meta = {{"generator", "topic"},
            {"group", std::to_string(degree)},
            {"count", std::to_string(count)},
            {"length", std::to_string(length)},
            {"n_topics", std::to_string(params.n_topics)},
            {"alpha", std::to_string(params.alpha)},
            {"seed", std::to_string(seed)}};

  std::vector<int> token_ids;
  for (const auto& t : params.tokens) token_ids.push_back(c.vocab.id(t));

  Rng rng = Rng::derive(seed, /*stream=*/3);
  auto sample_cat = [&](const std::vector<double>& c, double u) {
    return static_cast<int>(std::lower_bound(c.begin(), c.end(), u) - c.begin());
  };
  for (int d = 0; d < count; ++d) {
    std::vector<double> mix = rng.dirichlet(params.alpha, params.n_topics);
    std::vector<double> mix_cdf(mix.size());
    double acc = 0.0;
    for (size_t k = 0; k < mix.size(); ++k) {
      acc += mix[k];
      mix_cdf[k] = acc;
    }
    mix_cdf.back() = 1.0;

    Document doc;
    doc.input_ids.resize(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t) {
      int topic = sample_cat(mix_cdf, rng.uniform());
      int tok = sample_cat(cdf[static_cast<size_t>(topic)], rng.uniform());
      doc.input_ids[static_cast<size_t>(t)] = token_ids[static_cast<size_t>(tok)];
    }
    doc.target_ids.assign(static_cast<size_t>(length), -1);
    for (int t = 0; t + 1 < length; ++t) doc.target_ids[size_t(t)] = doc.input_ids[size_t(t + 1)];
    c.docs.push_back(std::move(doc));
  }
  return c;
}

Corpus gen_uniform_corpus(int degree, int count, int length, uint64_t seed) {
  if (count < 1 || length < 1) throw std::invalid_argument("gen_uniform_corpus: count and length must be positive");
  Corpus c;
  c.vocab = Vocab::for_group(degree);
  c.mode = CorpusMode::NextToken;
  c.group_degree = degree;
  c.meta = {{"generator", "uniform"},
            {"group", std::to_string(degree)},
            {"count", std::to_string(count)},
            {"length", std::to_string(length)},
            {"seed", std::to_string(seed)}};
  const size_t n_elems = enumerate_group(degree).size();
  Rng rng = Rng::derive(seed, /*stream=*/4);
  for (int d = 0; d < count; ++d) {
    Document doc;
    doc.input_ids.resize(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t)
      doc.input_ids[static_cast<size_t>(t)] = static_cast<int>(rng.below(n_elems));
    doc.target_ids.assign(static_cast<size_t>(length), -1);
    for (int t = 0; t + 1 < length; ++t) doc.target_ids[size_t(t)] = doc.input_ids[size_t(t + 1)];
    c.docs.push_back(std::move(doc));
  }
  return c;
}

Corpus parity_targets(const Corpus& c) {
  if (c.mode != CorpusMode::StatePrediction)
    throw std::invalid_argument("parity_targets: corpus must be in state-prediction mode");
  Corpus out = c;
  out.mode = CorpusMode::Parity;
  out.meta["derived"] = "parity-targets";
  const int even_id = c.vocab.id("0");
  const int odd_id = c.vocab.id("1");
  for (Document& doc : out.docs) {
    for (int& tgt : doc.target_ids) {
      if (tgt < 0) continue;
      Perm state = Perm::from_string(c.vocab.token(tgt));
      tgt = state.parity() == 0 ? even_id : odd_id;
    }
  }
  return out;
}

// ---- natural language --------------------------------------------------------

PhraseMap PhraseMap::default_s3() {
  // "Rotate the last item to the front" is the destination map 231 (the object
  // in the last slot moves to slot 1), and "rotate the first item to the back"
  // is 312; the two swaps and "do nothing" are involutions/identity and
  // unambiguous.
  PhraseMap pm;
  pm.phrase_for = {
      {"123", "Do nothing"},
      {"132", "Swap positions 2 and 3"},
      {"213", "Swap positions 1 and 2"},
      {"231", "Rotate the last item to the front"},
      {"312", "Rotate the first item to the back"},
      {"321", "Swap positions 1 and 3"},
  };
  return pm;
}

const std::string& PhraseMap::at(const Perm& p) const {
  auto it = phrase_for.find(p.str());
  if (it == phrase_for.end()) throw std::invalid_argument("PhraseMap: unmapped action " + p.str());
  return it->second;
}

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string w;
  while (iss >> w) out.push_back(w);
  return out;
}

}  // namespace

Vocab nl_vocab(const PhraseMap& pm, int degree) {
  std::vector<std::string> toks;
  for (const Perm& p : enumerate_group(degree)) toks.push_back(p.str());
  toks.push_back("0");
  toks.push_back("1");
  auto add = [&](const std::string& t) {
    if (std::find(toks.begin(), toks.end(), t) == toks.end()) toks.push_back(t);
  };
  for (const auto& [perm, phrase] : pm.phrase_for)
    for (const auto& w : split_words(phrase)) add(w);
  add(".");
  return Vocab::from_tokens(std::move(toks));
}

Document render_natural_language(std::span<const Perm> actions, const PhraseMap& pm,
                                 const Vocab& vocab) {
  if (actions.empty()) throw std::invalid_argument("render_natural_language: empty action sequence");
  auto states = cumulative_states(actions);
  Document doc;
  for (size_t a = 0; a < actions.size(); ++a) {
    for (const auto& w : split_words(pm.at(actions[a]))) {
      doc.input_ids.push_back(vocab.id(w));
      doc.target_ids.push_back(-1);
    }
    doc.input_ids.push_back(vocab.id("."));
    doc.target_ids.push_back(vocab.id(states[a].str()));
  }
  return doc;
}

std::vector<Perm> parse_natural_language(const Document& doc, const PhraseMap& pm,
                                         const Vocab& vocab) {
  std::map<std::string, Perm> by_phrase;
  for (const auto& [perm, phrase] : pm.phrase_for) by_phrase.emplace(phrase, Perm::from_string(perm));

  std::vector<Perm> actions;
  std::string sentence;
  for (int id : doc.input_ids) {
    const std::string& tok = vocab.token(id);
    if (tok == ".") {
      auto it = by_phrase.find(sentence);
      if (it == by_phrase.end())
        throw std::invalid_argument("parse_natural_language: unknown sentence \"" + sentence + "\"");
      actions.push_back(it->second);
      sentence.clear();
    } else {
      if (!sentence.empty()) sentence += ' ';
      sentence += tok;
    }
  }
  if (!sentence.empty()) throw std::invalid_argument("parse_natural_language: trailing words without period");
  return actions;
}

Corpus gen_nl_corpus(int count, int n_actions, uint64_t seed) {
  if (count < 1 || n_actions < 1) throw std::invalid_argument("gen_nl_corpus: count and n_actions must be positive");
  PhraseMap pm = PhraseMap::default_s3();
  Corpus c;
  c.vocab = nl_vocab(pm, 3);
  c.mode = CorpusMode::NaturalLanguage;
  c.group_degree = 3;
  c.meta = {{"generator", "natural-language"},
            {"group", "3"},
            {"count", std::to_string(count)},
            {"length", std::to_string(n_actions)},
            {"seed", std::to_string(seed)}};
  Rng rng = Rng::derive(seed, /*stream=*/5);
  for (int d = 0; d < count; ++d) {
    std::vector<Perm> actions;
    for (int t = 0; t < n_actions; ++t) actions.push_back(random_perm(rng, 3));
    c.docs.push_back(render_natural_language(actions, pm, c.vocab));
  }
  return c;
}

// ---- serialization -------------------------------------------------------------

void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  out << "#vocab:";
  for (const auto& t : c.vocab.tokens) out << ' ' << t;
  out << '\n';
  out << "#mode: " << to_string(c.mode) << '\n';
  out << "#meta:";
  out << " group=" << c.group_degree;
  for (const auto& [k, v] : c.meta)
    if (k != "group") out << ' ' << k << '=' << v;
  out << '\n';
  for (const Document& d : c.docs) {
    for (size_t i = 0; i < d.input_ids.size(); ++i) {
      if (i) out << ' ';
      out << c.vocab.token(d.input_ids[i]);
    }
    out << " |";
    for (size_t i = 0; i < d.target_ids.size(); ++i)
      if (d.target_ids[i] >= 0) out << ' ' << i << ':' << c.vocab.token(d.target_ids[i]);
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_corpus: write failed for " + path);
}

namespace {

[[noreturn]] void corpus_error(const std::string& path, int line_no, const std::string& what) {
  throw std::runtime_error("load_corpus: " + path + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  Corpus c;
  std::string line;
  int line_no = 0;
  bool have_vocab = false, have_mode = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("#vocab:", 0) == 0) {
      std::istringstream iss(line.substr(7));
      std::vector<std::string> toks;
      std::string t;
      while (iss >> t) toks.push_back(t);
      if (toks.empty()) corpus_error(path, line_no, "empty vocabulary");
      c.vocab = Vocab::from_tokens(std::move(toks));
      have_vocab = true;
      continue;
    }
    if (line.rfind("#mode:", 0) == 0) {
      std::string m = line.substr(6);
      m.erase(0, m.find_first_not_of(' '));
      try {
        c.mode = corpus_mode_from_string(m);
      } catch (const std::exception& e) {
        corpus_error(path, line_no, e.what());
      }
      have_mode = true;
      continue;
    }
    if (line.rfind("#meta:", 0) == 0) {
      std::istringstream iss(line.substr(6));
      std::string kv;
      while (iss >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) corpus_error(path, line_no, "bad meta entry " + kv);
        c.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      continue;
    }
    if (!have_vocab || !have_mode) corpus_error(path, line_no, "document before #vocab/#mode header");
    auto bar = line.find(" |");
    if (bar == std::string::npos) corpus_error(path, line_no, "missing \" |\" separator");
    Document doc;
    {
      std::istringstream iss(line.substr(0, bar));
      std::string t;
      while (iss >> t) {
        int id = c.vocab.find(t);
        if (id < 0) corpus_error(path, line_no, "unknown token " + t);
        doc.input_ids.push_back(id);
      }
    }
    if (doc.input_ids.empty()) corpus_error(path, line_no, "empty document");
    doc.target_ids.assign(doc.input_ids.size(), -1);
    {
      std::istringstream iss(line.substr(bar + 2));
      std::string pt;
      while (iss >> pt) {
        auto colon = pt.find(':');
        if (colon == std::string::npos) corpus_error(path, line_no, "bad target " + pt);
        int pos = -1;
        try {
          pos = std::stoi(pt.substr(0, colon));
        } catch (const std::exception&) {
          corpus_error(path, line_no, "bad target position in " + pt);
        }
        if (pos < 0 || pos >= doc.length()) corpus_error(path, line_no, "target position out of range");
        int id = c.vocab.find(pt.substr(colon + 1));
        if (id < 0) corpus_error(path, line_no, "unknown target token in " + pt);
        doc.target_ids[static_cast<size_t>(pos)] = id;
      }
    }
    c.docs.push_back(std::move(doc));
  }
  if (!have_vocab || !have_mode) throw std::runtime_error("load_corpus: " + path + ": missing header lines");
  auto it = c.meta.find("group");
  if (it != c.meta.end()) c.group_degree = std::stoi(it->second);
  return c;
}

}  // namespace stw
