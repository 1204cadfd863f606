#include "stw/reference.hpp"

#include <map>
#include <stdexcept>

namespace stw {

std::string to_string(Algorithm alg) {
  switch (alg) {
    case Algorithm::Sequential: return "sequential";
    case Algorithm::Parallel: return "parallel";
    case Algorithm::Associative: return "associative";
    case Algorithm::ParityAssociative: return "parity-associative";
  }
  throw std::logic_error("unknown algorithm");
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "sequential") return Algorithm::Sequential;
  if (s == "parallel") return Algorithm::Parallel;
  if (s == "associative") return Algorithm::Associative;
  if (s == "parity-associative" || s == "paa") return Algorithm::ParityAssociative;
  throw std::invalid_argument("unknown algorithm: " + s);
}

std::string to_string(ParityRelation rel) {
  switch (rel) {
    case ParityRelation::Same: return "same";
    case ParityRelation::Opposite: return "opposite";
    case ParityRelation::Averaged: return "averaged";
  }
  throw std::logic_error("unknown parity relation");
}

Perm paa_canonical_transposition(int degree) {
  if (degree == 3) return Perm::from_string("132");
  std::vector<uint8_t> d(static_cast<size_t>(degree));
  for (int i = 0; i < degree; ++i) d[static_cast<size_t>(i)] = static_cast<uint8_t>(i);
  std::swap(d[0], d[1]);
  return Perm::from_dest(std::move(d));
}

Perm paa_canonicalize(const Perm& p) {
  return p.parity() == 0 ? p : compose(p, paa_canonical_transposition(p.degree()));
}

Perm paa_decode(const PaaRegister& reg, int degree) {
  return reg.parity == 0 ? reg.kappa : compose(reg.kappa, paa_canonical_transposition(degree));
}

std::vector<Perm> RegisterGrid::final_predictions() const {
  std::vector<Perm> out;
  out.reserve(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    const RegisterCell& cell = at(t, L);
    if (const Perm* p = std::get_if<Perm>(&cell)) {
      out.push_back(*p);
    } else if (const PaaRegister* r = std::get_if<PaaRegister>(&cell)) {
      out.push_back(paa_decode(*r, r->kappa.degree()));
    } else {
      throw std::logic_error("final_predictions: inactive cell at deepest layer");
    }
  }
  return out;
}

RegisterGrid run_sequential(std::span<const Perm> actions, int L) {
  if (actions.empty()) throw std::invalid_argument("run_sequential: empty sequence");
  const int T = static_cast<int>(actions.size());
  RegisterGrid g;
  g.alg = Algorithm::Sequential;
  g.T = T;
  g.L = L;
  g.complete = L >= T - 1;  // s_t appears at layer t
  g.cells.resize(static_cast<size_t>(L + 1) * T);
  auto states = cumulative_states(actions);
  for (int t = 0; t < T; ++t)
    for (int l = 0; l <= L; ++l)
      g.at(t, l) = (l >= t) ? states[static_cast<size_t>(t)] : actions[static_cast<size_t>(t)];
  return g;
}

std::pair<std::vector<Perm>, std::vector<ParallelS3State>> run_parallel_s3(
    std::span<const Perm> actions) {
  if (actions.empty()) throw std::invalid_argument("run_parallel_s3: empty sequence");
  for (const Perm& a : actions)
    if (a.degree() != 3) throw std::invalid_argument("run_parallel_s3: degree must be 3");

  const Perm gen_a = Perm::from_string("132");  // transposition (23)
  const Perm gen_b = Perm::from_string("231");  // 3-cycle (123)

  // b^c a^p normal form for each of the six elements.
  std::map<std::string, ParallelS3State> normal_form;
  Perm bc = Perm::identity(3);
  for (int c = 0; c < 3; ++c) {
    normal_form[bc.str()] = {0, c};
    normal_form[compose(bc, gen_a).str()] = {1, c};
    bc = compose(bc, gen_b);
  }

  std::vector<Perm> states;
  std::vector<ParallelS3State> regs;
  int p = 0, c = 0;
  for (size_t i = 0; i < actions.size(); ++i) {
    ParallelS3State x = normal_form.at(actions[i].str());
    // s * x with s = b^c a^p, using the rewrite a b^k = b^{-k} a.
    c = (c + (p == 0 ? x.cycle_count : 3 - x.cycle_count)) % 3;
    p ^= x.transposition_parity;
    regs.push_back({p, c});
    Perm s = Perm::identity(3);
    for (int k = 0; k < c; ++k) s = compose(s, gen_b);
    if (p) s = compose(s, gen_a);
    states.push_back(s);
  }
  return {std::move(states), std::move(regs)};
}

namespace {

// Raw associative window products: w_{t,l} = a_{max(0, t-2^l+1)} ... a_t.
// Composes the left neighbor window when one exists; a window that already
// covers the whole prefix propagates unchanged.
std::vector<Perm> associative_windows(std::span<const Perm> actions, int L, int* out_T) {
  if (actions.empty()) throw std::invalid_argument("associative scan: empty sequence");
  const int T = static_cast<int>(actions.size());
  *out_T = T;
  std::vector<Perm> w(static_cast<size_t>(L + 1) * T);
  for (int t = 0; t < T; ++t) w[static_cast<size_t>(t)] = actions[static_cast<size_t>(t)];
  for (int l = 1; l <= L; ++l) {
    const long long step = 1LL << (l - 1);
    for (int t = 0; t < T; ++t) {
      const Perm& below = w[static_cast<size_t>(l - 1) * T + t];
      if (t >= step) {
        const Perm& left = w[static_cast<size_t>(l - 1) * T + (t - step)];
        w[static_cast<size_t>(l) * T + t] = compose(left, below);
      } else {
        w[static_cast<size_t>(l) * T + t] = below;  // window already starts at 0
      }
    }
  }
  return w;
}

}  // namespace

RegisterGrid run_associative(std::span<const Perm> actions, int L) {
  int T = 0;
  auto w = associative_windows(actions, L, &T);
  RegisterGrid g;
  g.alg = Algorithm::Associative;
  g.T = T;
  g.L = L;
  g.complete = (1LL << std::min(L, 62)) >= T;
  g.cells.resize(w.size());
  for (size_t i = 0; i < w.size(); ++i) g.cells[i] = w[i];
  return g;
}

RegisterGrid run_parity_associative(std::span<const Perm> actions, int L) {
  int T = 0;
  auto w = associative_windows(actions, L, &T);
  auto parities = state_parities(actions);
  RegisterGrid g;
  g.alg = Algorithm::ParityAssociative;
  g.T = T;
  g.L = L;
  g.complete = (1LL << std::min(L, 62)) >= T;
  g.cells.resize(w.size());
  for (int l = 0; l <= L; ++l)
    for (int t = 0; t < T; ++t)
      g.at(t, l) = PaaRegister{parities[static_cast<size_t>(t)],
                               paa_canonicalize(w[static_cast<size_t>(l) * T + t])};
  return g;
}

// ---- ideal signatures ---------------------------------------------------------

namespace {

// Associative staircase: cell active iff the window feeding the final column
// at layer l reaches back to position t, i.e. (T - t) * 2^(L - l) <= T.
bool associative_active(int T, int L, int t, int l) {
  long long lhs = static_cast<long long>(T - t);
  int shift = L - l;
  if (shift >= 62) return lhs <= 0;
  return (lhs << shift) <= static_cast<long long>(T);
}

Matrix patch_grid(Algorithm alg, int T, int L, ParityRelation rel, int l_P) {
  Matrix m(L + 1, T, 0.0);
  switch (alg) {
    case Algorithm::Sequential:
      for (int l = 0; l <= L; ++l)
        for (int t = 0; t < T; ++t) m.at(l, t) = (l >= t) ? 1.0 : 0.0;
      break;
    case Algorithm::Parallel:
      for (int l = 0; l <= L; ++l)
        for (int t = 0; t < T; ++t) m.at(l, t) = (l <= l_P || t == T - 1) ? 1.0 : 0.0;
      break;
    case Algorithm::Associative:
      for (int l = 0; l <= L; ++l)
        for (int t = 0; t < T; ++t) m.at(l, t) = associative_active(T, L, t, l) ? 1.0 : 0.0;
      break;
    case Algorithm::ParityAssociative: {
      if (rel == ParityRelation::Same) return patch_grid(Algorithm::Associative, T, L, rel, l_P);
      if (rel == ParityRelation::Opposite) return patch_grid(Algorithm::Parallel, T, L, rel, l_P);
      Matrix same = patch_grid(Algorithm::Associative, T, L, rel, l_P);
      Matrix opp = patch_grid(Algorithm::Parallel, T, L, rel, l_P);
      for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = 0.5 * (same.data[i] + opp.data[i]);
      break;
    }
  }
  return m;
}

}  // namespace

IdealSignature ideal_patching_signature(Algorithm alg, int T, int L, ParityRelation rel,
                                        int parallel_depth) {
  if (T < 1 || L < 0) throw std::invalid_argument("ideal_patching_signature: bad dimensions");
  IdealSignature sig;
  sig.alg = alg;
  sig.T = T;
  sig.L = L;
  sig.grid = patch_grid(alg, T, L, rel, parallel_depth);
  return sig;
}

IdealSignature ideal_probing_signature(Algorithm alg, int T, int L, double chance,
                                       int parallel_depth) {
  if (T < 1 || L < 0) throw std::invalid_argument("ideal_probing_signature: bad dimensions");
  IdealSignature sig;
  sig.alg = alg;
  sig.T = T;
  sig.L = L;
  sig.probe_state.resize(static_cast<size_t>(L + 1));
  sig.probe_parity.resize(static_cast<size_t>(L + 1));
  for (int l = 0; l <= L; ++l) {
    double resolved = 0.0;
    switch (alg) {
      case Algorithm::Sequential: resolved = std::min(1.0, double(l) / T); break;
      case Algorithm::Parallel: resolved = (l >= parallel_depth) ? 1.0 : 0.0; break;
      case Algorithm::Associative:
      case Algorithm::ParityAssociative:
        resolved = std::min(1.0, double(1LL << std::min(l, 62)) / T);
        break;
    }
    sig.probe_state[static_cast<size_t>(l)] = resolved + (1.0 - resolved) * chance;
    if (alg == Algorithm::Parallel || alg == Algorithm::ParityAssociative) {
      sig.probe_parity[static_cast<size_t>(l)] = (l >= parallel_depth) ? 1.0 : 0.5;
    } else {
      // Parity tracks the state when state representations happen to encode
      // it; the flat-chance alternative shape is emitted alongside.
      sig.probe_parity[static_cast<size_t>(l)] = resolved + (1.0 - resolved) * 0.5;
    }
  }
  if (alg == Algorithm::Sequential || alg == Algorithm::Associative)
    sig.probe_parity_alt.assign(static_cast<size_t>(L + 1), 0.5);
  return sig;
}

}  // namespace stw
