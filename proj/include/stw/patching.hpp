#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stw/matrix.hpp"
#include "stw/model.hpp"
#include "stw/permutation.hpp"
#include "stw/reference.hpp"

namespace stw {

// A clean/corrupted input pair differing only in the first token, labeled by
// whether the two final states share parity.
struct PatchPair {
  std::vector<int> clean, corrupted;  // token ids (group-element indices)
  Perm clean_final, corrupted_final;
  ParityRelation relation = ParityRelation::Same;  // Same or Opposite
};

// Uniform sequences with the corrupted first token drawn uniformly over the
// alternatives, stratified so the same/opposite parity classes are balanced.
std::vector<PatchPair> make_patch_pairs(int degree, int length, int n_pairs, uint64_t seed);

struct NldResult {
  double value = 0.0;
  bool degenerate = false;  // |LD(x) - LD(x')| below threshold, pair skipped
};

// Eq-2 normalized logit difference: how much the patch moves the corrupted
// run's final-position prediction back to the clean one. The reference outputs
// are the model's own argmax predictions on the clean and corrupted inputs.
NldResult nld(const ModelConfig& cfg, const Params& params, const PatchPair& pair,
              const PatchSpec& patch);

enum class GridMetric { Nld, CleanProb };
enum class GridMode { PrefixSub, SuffixDel, SuffixSub, WindowDel };

std::string to_string(GridMetric m);
std::string to_string(GridMode m);

struct SignatureGrid {
  int T = 0, L = 0;
  GridMetric metric = GridMetric::Nld;
  GridMode mode = GridMode::PrefixSub;
  std::string parity_filter = "averaged";
  Matrix values;  // (L+1) x T, row = layer boundary
  Matrix stddev;
  Matrix counts;
  int degenerate_pairs = 0;
  std::string note;
};

struct PrefixGrids {
  SignatureGrid same, opposite, averaged;
};

struct PrefixPatchResult {
  PrefixGrids nld;
  PrefixGrids clean_prob;
  int degenerate_pairs = 0;
};

// cell (t, l): positions 1..t substituted with clean residuals at boundary l
// on the corrupted run (position 0, the corrupted token, stays). Both metrics
// and the same-parity / opposite-parity / averaged variants come from one
// pass over the pairs.
PrefixPatchResult prefix_patch_grids(const ModelConfig& cfg, const Params& params,
                                     std::span<const PatchPair> pairs, bool include_pos0 = false,
                                     int n_threads = 0);

// Convenience: one metric and parity filter from the full computation.
SignatureGrid prefix_patch_grid(const ModelConfig& cfg, const Params& params,
                                std::span<const PatchPair> pairs, GridMetric metric,
                                ParityRelation filter = ParityRelation::Averaged,
                                bool include_pos0 = false, int n_threads = 0);

// cell (t, l): positions t..T-2 zeroed (deletion) or substituted with clean
// residuals (on the corrupted run) at boundary l. Deletion runs on the clean
// inputs and scores (LD(x) - LD(x; patch)) / LD(x) against the clean run's
// top-two predictions.
SignatureGrid suffix_patch_grid(const ModelConfig& cfg, const Params& params,
                                std::span<const PatchPair> pairs, bool zeros,
                                int n_threads = 0);

// cell (t, l): positions t..t+width-1 zero-deleted at boundary l (windows
// clipped at the sequence end).
SignatureGrid window_patch_grid(const ModelConfig& cfg, const Params& params,
                                std::span<const PatchPair> pairs, int width, int n_threads = 0);

}  // namespace stw
