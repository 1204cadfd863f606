#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stw/rng.hpp"

namespace stw {

// A permutation in S_n stored as a 0-based destination array: dest[i] is the
// slot that the object currently in slot i moves to. The display form is the
// 1-based digit string, e.g. "42315" moves the first object to slot 4.
class Perm {
public:
  Perm() = default;

  static Perm identity(int n);
  static Perm from_dest(std::vector<uint8_t> dest);  // validates bijection
  static Perm from_string(std::string_view digits);  // "42315" style, n <= 9

  int degree() const { return static_cast<int>(dest_.size()); }
  uint8_t operator[](int i) const { return dest_[static_cast<size_t>(i)]; }
  const std::vector<uint8_t>& dest() const { return dest_; }

  std::string str() const;
  bool is_identity() const;

  Perm inverse() const;
  // 0 = even, 1 = odd; computed from the cycle count.
  int parity() const;

  friend bool operator==(const Perm& a, const Perm& b) = default;

private:
  std::vector<uint8_t> dest_;
};

// Applies a then b: result[i] = b[a[i]]. Throws on degree mismatch.
Perm compose(const Perm& a, const Perm& b);

// Slot s[i] of the output holds labels[i]. Throws on length mismatch.
std::string apply_to_labels(const Perm& s, std::string_view labels);

// All n! elements in lexicographic display order. n must lie in [1, 8].
std::vector<Perm> enumerate_group(int n);

Perm random_perm(Rng& rng, int n);

// Running left-to-right products s_t = a_0 ... a_t. Throws on empty input.
std::vector<Perm> cumulative_states(std::span<const Perm> actions);

// Parity of each cumulative state, via the parity homomorphism.
std::vector<int> state_parities(std::span<const Perm> actions);

}  // namespace stw
