#include "stw/permutation.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace stw {

Perm Perm::identity(int n) {
  if (n < 1) throw std::invalid_argument("Perm: degree must be positive");
  std::vector<uint8_t> d(static_cast<size_t>(n));
  std::iota(d.begin(), d.end(), uint8_t{0});
  Perm p;
  p.dest_ = std::move(d);
  return p;
}

Perm Perm::from_dest(std::vector<uint8_t> dest) {
  size_t n = dest.size();
  if (n == 0) throw std::invalid_argument("Perm: empty destination array");
  std::vector<bool> seen(n, false);
  for (uint8_t d : dest) {
    if (d >= n || seen[d]) throw std::invalid_argument("Perm: not a bijection");
    seen[d] = true;
  }
  Perm p;
  p.dest_ = std::move(dest);
  return p;
}

Perm Perm::from_string(std::string_view digits) {
  if (digits.empty() || digits.size() > 9)
    throw std::invalid_argument("Perm: display string must have 1..9 digits");
  std::vector<uint8_t> d(digits.size());
  for (size_t i = 0; i < digits.size(); ++i) {
    char c = digits[i];
    if (c < '1' || c > '0' + static_cast<char>(digits.size()))
      throw std::invalid_argument("Perm: bad digit in \"" + std::string(digits) + "\"");
    d[i] = static_cast<uint8_t>(c - '1');
  }
  return from_dest(std::move(d));
}

std::string Perm::str() const {
  std::string s(dest_.size(), '?');
  for (size_t i = 0; i < dest_.size(); ++i) s[i] = static_cast<char>('1' + dest_[i]);
  return s;
}

bool Perm::is_identity() const {
  for (size_t i = 0; i < dest_.size(); ++i)
    if (dest_[i] != i) return false;
  return true;
}

Perm Perm::inverse() const {
  std::vector<uint8_t> inv(dest_.size());
  for (size_t i = 0; i < dest_.size(); ++i) inv[dest_[i]] = static_cast<uint8_t>(i);
  Perm p;
  p.dest_ = std::move(inv);
  return p;
}

int Perm::parity() const {
  int n = degree();
  std::vector<bool> seen(static_cast<size_t>(n), false);
  int cycles = 0;
  for (int i = 0; i < n; ++i) {
    if (seen[static_cast<size_t>(i)]) continue;
    ++cycles;
    for (int j = i; !seen[static_cast<size_t>(j)]; j = dest_[static_cast<size_t>(j)])
      seen[static_cast<size_t>(j)] = true;
  }
  return (n - cycles) & 1;
}

Perm compose(const Perm& a, const Perm& b) {
  if (a.degree() != b.degree()) throw std::invalid_argument("compose: degree mismatch");
  std::vector<uint8_t> r(static_cast<size_t>(a.degree()));
  for (int i = 0; i < a.degree(); ++i) r[static_cast<size_t>(i)] = b[a[i]];
  return Perm::from_dest(std::move(r));
}

std::string apply_to_labels(const Perm& s, std::string_view labels) {
  if (static_cast<int>(labels.size()) != s.degree())
    throw std::invalid_argument("apply_to_labels: label count != degree");
  std::string out(labels.size(), '?');
  for (int i = 0; i < s.degree(); ++i) out[s[i]] = labels[static_cast<size_t>(i)];
  return out;
}

std::vector<Perm> enumerate_group(int n) {
  if (n < 1 || n > 8) throw std::invalid_argument("enumerate_group: degree must be in [1, 8]");
  std::vector<uint8_t> d(static_cast<size_t>(n));
  std::iota(d.begin(), d.end(), uint8_t{0});
  std::vector<Perm> out;
  do {
    out.push_back(Perm::from_dest(d));
  } while (std::next_permutation(d.begin(), d.end()));
  return out;
}

Perm random_perm(Rng& rng, int n) {
  std::vector<uint8_t> d(static_cast<size_t>(n));
  std::iota(d.begin(), d.end(), uint8_t{0});
  for (size_t i = d.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.below(i));
    std::swap(d[i - 1], d[j]);
  }
  return Perm::from_dest(std::move(d));
}

std::vector<Perm> cumulative_states(std::span<const Perm> actions) {
  if (actions.empty()) throw std::invalid_argument("cumulative_states: empty sequence");
  std::vector<Perm> states;
  states.reserve(actions.size());
  states.push_back(actions[0]);
  for (size_t t = 1; t < actions.size(); ++t)
    states.push_back(compose(states.back(), actions[t]));
  return states;
}

std::vector<int> state_parities(std::span<const Perm> actions) {
  if (actions.empty()) throw std::invalid_argument("state_parities: empty sequence");
  std::vector<int> out;
  out.reserve(actions.size());
  int p = 0;
  for (const Perm& a : actions) {
    p ^= a.parity();
    out.push_back(p);
  }
  return out;
}

}  // namespace stw
