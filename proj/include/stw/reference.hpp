#pragma once

#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "stw/matrix.hpp"
#include "stw/permutation.hpp"

namespace stw {

enum class Algorithm { Sequential, Parallel, Associative, ParityAssociative };

std::string to_string(Algorithm alg);
Algorithm algorithm_from_string(const std::string& s);

// Parity register plus the canonical complement: kappa is the coset
// representative of the register's window product in the alternating subgroup
// (odd products right-multiplied by a fixed transposition).
struct PaaRegister {
  int parity = 0;  // parity of the full prefix, available from layer 0 on
  Perm kappa;

  bool operator==(const PaaRegister&) const = default;
};

using RegisterCell = std::variant<std::monostate, Perm, PaaRegister>;

// (position x layer) array of exact algorithm registers; row l of the layout
// is layer l with layers 0..L, layer 0 holding the initialized registers.
struct RegisterGrid {
  Algorithm alg = Algorithm::Sequential;
  int T = 0, L = 0;
  bool complete = true;  // false when L is too shallow to resolve every state
  std::vector<RegisterCell> cells;  // (L+1) * T, row-major by layer

  const RegisterCell& at(int t, int l) const { return cells[static_cast<size_t>(l) * T + t]; }
  RegisterCell& at(int t, int l) { return cells[static_cast<size_t>(l) * T + t]; }

  // Deepest-layer register decoded to a state prediction per position.
  std::vector<Perm> final_predictions() const;
};

// The fixed transposition used to canonicalize odd permutations ("132" for S3,
// "21345..." otherwise).
Perm paa_canonical_transposition(int degree);
Perm paa_canonicalize(const Perm& p);
Perm paa_decode(const PaaRegister& reg, int degree);

// One-permutation-at-a-time composition: h_{t,l} = a_t below the diagonal and
// s_t on/above it.
RegisterGrid run_sequential(std::span<const Perm> actions, int L);

struct ParallelS3State {
  int transposition_parity = 0;
  int cycle_count = 0;  // count of 3-cycles mod 3

  bool operator==(const ParallelS3State&) const = default;
};

// Constant-depth S3 evaluation through the b^c a^p normal form over the
// generators a = (23) = "132" and b = (123) = "231".
std::pair<std::vector<Perm>, std::vector<ParallelS3State>> run_parallel_s3(
    std::span<const Perm> actions);

// Hierarchical window products: cell (t,l) holds a_{max(0,t-2^l+1)} ... a_t.
RegisterGrid run_associative(std::span<const Perm> actions, int L);

// Parity register computed at layer 0 and propagated; complement register
// follows the associative recurrence in canonical (alternating-coset) form.
RegisterGrid run_parity_associative(std::span<const Perm> actions, int L);

// ---- ideal signatures ---------------------------------------------------------

enum class ParityRelation { Same, Opposite, Averaged };

std::string to_string(ParityRelation rel);

// Expected interpretability readouts for one algorithm. grid rows are layers
// 0..L, columns positions 0..T-1. probe_parity_alt, when non-empty, is the
// second parity-probe shape consistent with the algorithm (flat chance).
struct IdealSignature {
  Algorithm alg = Algorithm::Sequential;
  int T = 0, L = 0;
  Matrix grid;
  std::vector<double> probe_state;
  std::vector<double> probe_parity;
  std::vector<double> probe_parity_alt;
};

IdealSignature ideal_patching_signature(Algorithm alg, int T, int L,
                                        ParityRelation rel = ParityRelation::Averaged,
                                        int parallel_depth = 2);

IdealSignature ideal_probing_signature(Algorithm alg, int T, int L, double chance,
                                       int parallel_depth = 2);

}  // namespace stw
