#include "stw/permutation.hpp"

#include <map>
#include <set>
#include <stdexcept>

#include "doctest.h"

using namespace stw;

namespace {

// Independent fold oracle: composes destination arrays index by index without
// going through the Perm API.
std::vector<uint8_t> fold_dest(const std::vector<std::vector<uint8_t>>& actions) {
  std::vector<uint8_t> acc = actions[0];
  for (size_t t = 1; t < actions.size(); ++t) {
    std::vector<uint8_t> next(acc.size());
    for (size_t i = 0; i < acc.size(); ++i) next[i] = actions[t][acc[i]];
    acc = next;
  }
  return acc;
}

Perm P(std::string_view s) { return Perm::from_string(s); }

}  // namespace

TEST_CASE("compose matches the worked product 42315 * 12534 = 32514") {
  CHECK(compose(P("42315"), P("12534")).str() == "32514");
}

TEST_CASE("compose identity cases, exhaustive over S3") {
  Perm id = Perm::identity(3);
  for (const Perm& p : enumerate_group(3)) {
    CHECK(compose(id, p) == p);
    CHECK(compose(p, id) == p);
  }
}

TEST_CASE("a swap is an involution and a 3-cycle squares to its inverse") {
  CHECK(compose(P("213"), P("213")).str() == "123");
  CHECK(compose(P("231"), P("231")).str() == "312");
}

TEST_CASE("compose rejects degree mismatch") {
  CHECK_THROWS_AS(compose(P("213"), P("2134")), std::invalid_argument);
}

TEST_CASE("inverse basics") {
  CHECK(Perm::identity(4).inverse() == Perm::identity(4));
  CHECK(P("231").inverse().str() == "312");
  CHECK(P("213").inverse().str() == "213");
}

TEST_CASE("parity basics") {
  CHECK(P("12345").parity() == 0);
  CHECK(P("21345").parity() == 1);
  CHECK(P("12534").parity() == 0);  // cycle (3 5 4) is a 3-cycle
  int even = 0, odd = 0;
  for (const Perm& p : enumerate_group(3)) (p.parity() == 0 ? even : odd)++;
  CHECK(even == 3);
  CHECK(odd == 3);
}

TEST_CASE("cumulative_states matches the Fig-style worked example") {
  std::vector<Perm> a{P("42315"), P("12534")};
  auto s = cumulative_states(a);
  REQUIRE(s.size() == 2);
  CHECK(s[0].str() == "42315");
  CHECK(s[1].str() == "32514");
}

TEST_CASE("cumulative_states of identities stays identity") {
  std::vector<Perm> a(3, Perm::identity(3));
  for (const Perm& s : cumulative_states(a)) CHECK(s.is_identity());
}

TEST_CASE("cumulative_states equals an independent fold oracle on random S5 input") {
  Rng rng(99);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<Perm> a;
    std::vector<std::vector<uint8_t>> raw;
    for (int t = 0; t < 8; ++t) {
      a.push_back(random_perm(rng, 5));
      raw.push_back(a.back().dest());
    }
    auto states = cumulative_states(a);
    CHECK(states.back().dest() == fold_dest(raw));
  }
}

TEST_CASE("state_parities on two swaps and on identities") {
  std::vector<Perm> swaps{P("213"), P("213")};
  CHECK(state_parities(swaps) == std::vector<int>{1, 0});
  std::vector<Perm> ids(5, Perm::identity(3));
  CHECK(state_parities(ids) == std::vector<int>(5, 0));
}

TEST_CASE("state_parities cross-checks cumulative state parity, length 100 and 200") {
  Rng rng(4);
  for (int len : {100, 200}) {
    std::vector<Perm> a;
    for (int t = 0; t < len; ++t) a.push_back(random_perm(rng, 3));
    auto par = state_parities(a);
    auto states = cumulative_states(a);
    for (int t = 0; t < len; ++t) CHECK(par[size_t(t)] == states[size_t(t)].parity());
  }
}

TEST_CASE("apply_to_labels") {
  CHECK(apply_to_labels(P("32514"), "ABCDE") == "DBAEC");
  CHECK(apply_to_labels(Perm::identity(3), "ABC") == "ABC");
  CHECK(apply_to_labels(P("213"), "ABC") == "BAC");
  CHECK_THROWS_AS(apply_to_labels(P("213"), "ABCD"), std::invalid_argument);
}

TEST_CASE("enumerate_group sizes, order and validity") {
  auto s3 = enumerate_group(3);
  REQUIRE(s3.size() == 6);
  CHECK(s3.front().str() == "123");
  CHECK(s3.back().str() == "321");
  CHECK(enumerate_group(5).size() == 120);
  std::set<std::string> seen;
  for (const Perm& p : s3) {
    CHECK(Perm::from_dest(p.dest()) == p);  // bijection invariant re-validated
    seen.insert(p.str());
  }
  CHECK(seen.size() == 6);
  CHECK_THROWS_AS(enumerate_group(9), std::invalid_argument);
}

TEST_CASE("random_perm is deterministic and uniform at 3 sigma") {
  Rng a(7), b(7);
  for (int i = 0; i < 50; ++i) CHECK(random_perm(a, 5) == random_perm(b, 5));

  Rng rng(12345);
  std::map<std::string, int> counts;
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) counts[random_perm(rng, 3).str()]++;
  const double expected = draws / 6.0;
  const double sigma = std::sqrt(draws * (1.0 / 6.0) * (5.0 / 6.0));
  CHECK(counts.size() == 6);
  for (const auto& [k, c] : counts) {
    INFO(k, " -> ", c);
    CHECK(std::abs(c - expected) <= 3.0 * sigma);
  }

  Rng one(3);
  for (int i = 0; i < 10; ++i) CHECK(random_perm(one, 1).is_identity());
}

TEST_CASE("associativity: exhaustive on S3, sampled on S5") {
  auto s3 = enumerate_group(3);
  for (const Perm& a : s3)
    for (const Perm& b : s3)
      for (const Perm& c : s3) CHECK(compose(compose(a, b), c) == compose(a, compose(b, c)));

  Rng rng(8);
  for (int i = 0; i < 10000; ++i) {
    Perm a = random_perm(rng, 5), b = random_perm(rng, 5), c = random_perm(rng, 5);
    CHECK(compose(compose(a, b), c) == compose(a, compose(b, c)));
  }
}

TEST_CASE("parity is a homomorphism, exhaustive on S3 and S5") {
  for (int n : {3, 5}) {
    auto g = enumerate_group(n);
    for (const Perm& a : g)
      for (const Perm& b : g) CHECK(compose(a, b).parity() == (a.parity() ^ b.parity()));
  }
}

TEST_CASE("inverse law over every enumerated element") {
  for (int n : {3, 4, 5}) {
    for (const Perm& p : enumerate_group(n)) {
      CHECK(compose(p, p.inverse()).is_identity());
      CHECK(compose(p.inverse(), p).is_identity());
    }
  }
}

TEST_CASE("display string round trip") {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    Perm p = random_perm(rng, 5);
    CHECK(Perm::from_string(p.str()) == p);
  }
  CHECK_THROWS_AS(Perm::from_string("142"), std::invalid_argument);  // '4' out of range
  CHECK_THROWS_AS(Perm::from_string("112"), std::invalid_argument);
}
