#include "stw/corpus.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"

using namespace stw;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("group vocab layout") {
  Vocab v = Vocab::for_group(3);
  REQUIRE(v.size() == 8);
  CHECK(v.token(0) == "123");
  CHECK(v.token(5) == "321");
  CHECK(v.id("0") == 6);
  CHECK(v.id("1") == 7);
  CHECK(v.find("999") == -1);
  CHECK(Vocab::for_group(5).size() == 122);
  CHECK_THROWS_AS(Vocab::from_tokens({"a", "a"}), std::invalid_argument);
}

TEST_CASE("gen_word_corpus determinism, uniqueness and target soundness") {
  Corpus a = gen_word_corpus(3, 10, 4, 7);
  Corpus b = gen_word_corpus(3, 10, 4, 7);
  std::string pa = temp_path("stw_corpus_a.txt"), pb = temp_path("stw_corpus_b.txt");
  save_corpus(a, pa);
  save_corpus(b, pb);
  CHECK(slurp(pa) == slurp(pb));  // byte-identical rerun
  std::remove(pa.c_str());
  std::remove(pb.c_str());

  std::set<std::vector<int>> inputs;
  for (const Document& d : a.docs) inputs.insert(d.input_ids);
  CHECK(inputs.size() == a.docs.size());

  for (const Document& d : a.docs) {
    std::vector<Perm> actions;
    for (int id : d.input_ids) actions.push_back(Perm::from_string(a.vocab.token(id)));
    auto states = cumulative_states(actions);
    REQUIRE(d.target_ids.size() == states.size());
    for (size_t t = 0; t < states.size(); ++t)
      CHECK(a.vocab.token(d.target_ids[t]) == states[t].str());
  }
}

TEST_CASE("gen_word_corpus small and infeasible cases") {
  Corpus tiny = gen_word_corpus(3, 2, 1, 3);
  REQUIRE(tiny.size() == 2);
  CHECK(tiny.docs[0].input_ids != tiny.docs[1].input_ids);
  CHECK_THROWS_AS(gen_word_corpus(3, 7, 1, 3), std::invalid_argument);  // > 6 distinct length-1 docs
}

TEST_CASE("target soundness over a larger sample") {
  Corpus c = gen_word_corpus(3, 1000, 12, 21);
  for (const Document& d : c.docs) {
    std::vector<Perm> actions;
    for (int id : d.input_ids) actions.push_back(Perm::from_string(c.vocab.token(id)));
    auto states = cumulative_states(actions);
    for (size_t t = 0; t < states.size(); ++t)
      REQUIRE(c.vocab.token(d.target_ids[t]) == states[t].str());
  }
}

TEST_CASE("split_corpus partitions cleanly") {
  Corpus c = gen_word_corpus(3, 100, 4, 11);
  auto [train, eval] = split_corpus(c, 0.9, 5);
  CHECK(train.size() == 90);
  CHECK(eval.size() == 10);

  Corpus c10 = gen_word_corpus(3, 10, 6, 13);
  auto [t5, e5] = split_corpus(c10, 0.5, 5);
  CHECK(t5.size() == 5);
  CHECK(e5.size() == 5);
  std::set<std::vector<int>> all;
  for (const Document& d : t5.docs) all.insert(d.input_ids);
  for (const Document& d : e5.docs) all.insert(d.input_ids);
  CHECK(all.size() == 10);  // disjoint union equals the input

  auto [t5b, e5b] = split_corpus(c10, 0.5, 5);
  for (size_t i = 0; i < t5.docs.size(); ++i) CHECK(t5.docs[i].input_ids == t5b.docs[i].input_ids);

  CHECK_THROWS_AS(split_corpus(c10, 0.01, 5), std::invalid_argument);  // empty side
}

TEST_CASE("appG1 preset stores the printed matrix verbatim") {
  TopicModelParams p = TopicModelParams::preset("appG1");
  CHECK(p.n_topics == 4);
  CHECK(p.alpha == doctest::Approx(0.3));
  CHECK(p.token_topic[0][5] == doctest::Approx(8.45e-1));  // p(321 | topic 1)
  CHECK(p.token_topic[2][2] == doctest::Approx(9.44e-1));
  CHECK(p.token_topic[1][0] == doctest::Approx(3.36e-1));
  for (const auto& row : p.token_topic) {
    double sum = 0.0;
    for (double x : row) sum += x;
    CHECK(std::abs(sum - 1.0) <= 1e-3);
  }
  TopicModelParams q = TopicModelParams::preset("appG2");
  CHECK(q.token_topic[0][0] == doctest::Approx(9.31e-1));
  for (const auto& row : q.token_topic) {
    double sum = 0.0;
    for (double x : row) sum += x;
    CHECK(std::abs(sum - 1.0) <= 1e-3);
  }
  CHECK_THROWS_AS(TopicModelParams::preset("nope"), std::invalid_argument);
}

TEST_CASE("degenerate topic model emits constant documents") {
  TopicModelParams p;
  p.n_topics = 1;
  p.alpha = 1.0;
  p.tokens = {"123", "132", "213", "231", "312", "321"};
  p.token_topic = {{0, 0, 0, 1.0, 0, 0}};
  Corpus c = gen_topic_corpus(p, 5, 10, 1);
  for (const Document& d : c.docs)
    for (int id : d.input_ids) CHECK(c.vocab.token(id) == "231");
  CHECK(c.mode == CorpusMode::NextToken);
  CHECK(c.docs[0].target_ids.back() == -1);  // last position untargeted
}

TEST_CASE("topic corpus unigram frequencies match the mixture-implied marginal") {
  // Monte-Carlo oracle: with a symmetric Dirichlet the expected topic weight is
  // 1/K, so the marginal over tokens is the column mean of the row-normalized
  // token_topic matrix.
  TopicModelParams p = TopicModelParams::preset("appG1");
  std::vector<double> marginal(6, 0.0);
  for (const auto& row : p.token_topic) {
    double sum = 0.0;
    for (double x : row) sum += x;
    for (size_t j = 0; j < row.size(); ++j) marginal[j] += row[j] / sum / p.n_topics;
  }
  const int n_docs = 500, len = 100;  // 50k tokens
  Corpus c = gen_topic_corpus(p, n_docs, len, 99);
  // Tokens within a document share a topic mixture, so the 3-sigma band uses
  // the between-document standard error of the per-document frequency.
  for (size_t j = 0; j < 6; ++j) {
    std::vector<double> freq;
    for (const Document& d : c.docs) {
      int cnt = 0;
      for (int id : d.input_ids) {
        REQUIRE(id < 6);
        if (static_cast<size_t>(id) == j) ++cnt;
      }
      freq.push_back(double(cnt) / len);
    }
    double mean = 0.0;
    for (double f : freq) mean += f;
    mean /= n_docs;
    double var = 0.0;
    for (double f : freq) var += (f - mean) * (f - mean);
    double se = std::sqrt(var / (n_docs - 1) / n_docs);
    INFO("token ", c.vocab.token(static_cast<int>(j)), " mean ", mean, " marginal ", marginal[j]);
    CHECK(std::abs(mean - marginal[j]) <= 3.0 * se + 1e-3);
  }
}

TEST_CASE("uniform corpus frequencies, determinism, and length-1 targets") {
  Corpus c = gen_uniform_corpus(3, 600, 100, 17);  // 60k tokens
  std::vector<long> counts(6, 0);
  for (const Document& d : c.docs)
    for (int id : d.input_ids) counts[static_cast<size_t>(id)]++;
  const double total = 60000.0;
  const double sigma = std::sqrt(total * (1.0 / 6.0) * (5.0 / 6.0));
  for (long cnt : counts) CHECK(std::abs(cnt - total / 6.0) <= 3.0 * sigma);

  Corpus c2 = gen_uniform_corpus(3, 600, 100, 17);
  for (int i = 0; i < c.size(); ++i) CHECK(c.docs[size_t(i)].input_ids == c2.docs[size_t(i)].input_ids);

  Corpus one = gen_uniform_corpus(3, 4, 1, 2);
  for (const Document& d : one.docs)
    for (int t : d.target_ids) CHECK(t == -1);
}

TEST_CASE("parity_targets") {
  Corpus c = gen_word_corpus(3, 50, 8, 23);
  Corpus p = parity_targets(c);
  CHECK(p.mode == CorpusMode::Parity);
  for (int i = 0; i < c.size(); ++i) {
    std::vector<Perm> actions;
    for (int id : c.docs[size_t(i)].input_ids)
      actions.push_back(Perm::from_string(c.vocab.token(id)));
    auto par = state_parities(actions);
    for (size_t t = 0; t < par.size(); ++t)
      CHECK(p.vocab.token(p.docs[size_t(i)].target_ids[t]) == (par[t] ? "1" : "0"));
  }

  // two swaps -> odd then even
  Vocab v = Vocab::for_group(3);
  Corpus two;
  two.vocab = v;
  two.mode = CorpusMode::StatePrediction;
  two.group_degree = 3;
  Document d;
  d.input_ids = {v.id("213"), v.id("213")};
  d.target_ids = {v.id("213"), v.id("123")};
  two.docs.push_back(d);
  Corpus tp = parity_targets(two);
  CHECK(tp.vocab.token(tp.docs[0].target_ids[0]) == "1");
  CHECK(tp.vocab.token(tp.docs[0].target_ids[1]) == "0");

  Corpus ntp = gen_uniform_corpus(3, 2, 4, 1);
  CHECK_THROWS_AS(parity_targets(ntp), std::invalid_argument);
}

TEST_CASE("natural language rendering reproduces the worked example") {
  PhraseMap pm = PhraseMap::default_s3();
  Vocab v = nl_vocab(pm, 3);
  // "Swap positions 2 and 3. Rotate the last item to the front. Swap positions
  // 1 and 2." composes to the state 123.
  std::vector<Perm> actions{Perm::from_string("132"), Perm::from_string("231"),
                            Perm::from_string("213")};
  Document doc = render_natural_language(actions, pm, v);

  std::string text;
  for (int id : doc.input_ids) {
    if (!text.empty()) text += ' ';
    text += v.token(id);
  }
  CHECK(text ==
        "Swap positions 2 and 3 . Rotate the last item to the front . Swap positions 1 and 2 .");

  // target exists exactly at each '.', and the final one is the state 123
  int last_target = -1;
  for (size_t i = 0; i < doc.input_ids.size(); ++i) {
    bool is_period = v.token(doc.input_ids[i]) == ".";
    CHECK((doc.target_ids[i] >= 0) == is_period);
    if (is_period) last_target = doc.target_ids[i];
  }
  CHECK(v.token(last_target) == "123");
}

TEST_CASE("natural language single action and round trip") {
  PhraseMap pm = PhraseMap::default_s3();
  Vocab v = nl_vocab(pm, 3);
  std::vector<Perm> single{Perm::from_string("132")};
  Document doc = render_natural_language(single, pm, v);
  CHECK(v.token(doc.target_ids.back()) == "132");

  Rng rng(31);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<Perm> actions;
    for (int t = 0; t < 6; ++t) actions.push_back(random_perm(rng, 3));
    Document d = render_natural_language(actions, pm, v);
    CHECK(parse_natural_language(d, pm, v) == actions);
  }

  PhraseMap partial;
  partial.phrase_for = {{"123", "Do nothing"}};
  CHECK_THROWS_AS(render_natural_language(single, partial, v), std::invalid_argument);
}

TEST_CASE("corpus serialization round trip") {
  for (Corpus c : {gen_word_corpus(3, 20, 6, 5), gen_uniform_corpus(3, 10, 5, 6),
                   gen_nl_corpus(5, 4, 7)}) {
    std::string path = temp_path("stw_roundtrip.txt");
    save_corpus(c, path);
    Corpus r = load_corpus(path);
    CHECK(r.vocab == c.vocab);
    CHECK(r.mode == c.mode);
    CHECK(r.group_degree == c.group_degree);
    REQUIRE(r.size() == c.size());
    for (int i = 0; i < c.size(); ++i) {
      CHECK(r.docs[size_t(i)].input_ids == c.docs[size_t(i)].input_ids);
      CHECK(r.docs[size_t(i)].target_ids == c.docs[size_t(i)].target_ids);
    }
    std::remove(path.c_str());
  }
}

TEST_CASE("corrupted corpus file reports the line number") {
  std::string path = temp_path("stw_corrupt.txt");
  {
    std::ofstream out(path);
    out << "#vocab: 123 132 213 231 312 321 0 1\n";
    out << "#mode: state-prediction\n";
    out << "123 132 | 0:123 1:312\n";
    out << "123 999 | 0:123\n";  // unknown token on line 4
  }
  try {
    load_corpus(path);
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":4:") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("header-only file loads as an empty corpus") {
  std::string path = temp_path("stw_empty.txt");
  {
    std::ofstream out(path);
    out << "#vocab: 123 132 213 231 312 321 0 1\n";
    out << "#mode: state-prediction\n";
    out << "#meta: group=3\n";
  }
  Corpus c = load_corpus(path);
  CHECK(c.size() == 0);
  CHECK(c.vocab.size() == 8);
  CHECK(c.group_degree == 3);
  std::remove(path.c_str());

  std::string bare = temp_path("stw_bare.txt");
  { std::ofstream out(bare); }
  CHECK_THROWS(load_corpus(bare));
  std::remove(bare.c_str());
}

TEST_CASE("all generators are bit-deterministic under a fixed seed") {
  auto dump = [&](const Corpus& c) {
    std::string path = temp_path("stw_det.txt");
    save_corpus(c, path);
    std::string s = slurp(path);
    std::remove(path.c_str());
    return s;
  };
  CHECK(dump(gen_topic_corpus(TopicModelParams::preset("appG1"), 20, 30, 9)) ==
        dump(gen_topic_corpus(TopicModelParams::preset("appG1"), 20, 30, 9)));
  CHECK(dump(gen_nl_corpus(10, 5, 3)) == dump(gen_nl_corpus(10, 5, 3)));
  CHECK(dump(gen_word_corpus(5, 50, 16, 2)) == dump(gen_word_corpus(5, 50, 16, 2)));
}
