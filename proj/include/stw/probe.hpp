#pragma once

#include <span>
#include <string>
#include <vector>

#include "stw/corpus.hpp"
#include "stw/matrix.hpp"
#include "stw/model.hpp"

namespace stw {

enum class PositionPolicy { LastToken, PerPosition };
enum class ProbeTarget { State, Parity };

struct ProbeData {
  Matrix X;                  // n x d_model residual vectors
  std::vector<int> y_state;  // group-element index of the target state
  std::vector<int> y_parity;
  int n_state_classes = 0;
};

// Residual vectors at one layer boundary with ground-truth state/parity
// labels. The corpus must be in state-prediction mode. max_docs = 0 uses all.
ProbeData collect_probe_data(const ModelConfig& cfg, const Params& params, const Corpus& corpus,
                             int layer, PositionPolicy policy, int max_docs = 0,
                             int n_threads = 0);

struct Probe {
  Matrix W;  // d x C
  std::vector<double> b;
  int layer = -1;
  ProbeTarget target = ProbeTarget::State;
};

struct ProbeSolverConfig {
  double l2_penalty = 1e-4;
  double tol = 1e-8;   // stop when the gradient sup-norm falls below this
  int max_iters = 2000;
  double lr = 0.5;     // full-batch Adam
  uint64_t seed = 0;   // used only where a split is drawn
};

struct ProbeFit {
  Probe probe;
  double heldout_accuracy = 0.0;
  double heldout_mean_correct_prob = 0.0;
  int iters = 0;
  double grad_sup_norm = 0.0;
};

// Multinomial logistic regression trained full-batch from a zero start (the
// objective is convex); deterministic.
ProbeFit train_probe(const Matrix& X_train, std::span<const int> y_train, const Matrix& X_eval,
                     std::span<const int> y_eval, int n_classes,
                     const ProbeSolverConfig& cfg = {});

// Deterministic 80/20 shuffle-split convenience wrapper.
ProbeFit train_probe_split(const Matrix& X, std::span<const int> y, int n_classes,
                           const ProbeSolverConfig& cfg = {});

std::vector<double> probe_predict_proba(const Probe& probe, const double* x);

struct ProbeCurves {
  std::vector<double> state_acc;  // indexed by layer boundary 0..L
  std::vector<double> parity_acc;
  int n_train = 0, n_eval = 0;
};

// Last-token state and parity probes per layer, trained on one set of
// documents and evaluated on a held-out set.
ProbeCurves probe_curves(const ModelConfig& cfg, const Params& params, const Corpus& corpus,
                         uint64_t seed, int n_train_docs = 1500, int n_eval_docs = 500,
                         const ProbeSolverConfig& solver = {}, int n_threads = 0);

// rows = layer boundaries, cols = lengths; mean probability assigned to the
// correct final state by a probe on the final-token representation.
Matrix probe_by_length(const ModelConfig& cfg, const Params& params, int degree,
                       std::span<const int> lengths, int n_train_seqs, int n_eval_seqs,
                       uint64_t seed, const ProbeSolverConfig& solver = {}, int n_threads = 0);

struct PcaDecomposition {
  std::vector<double> parity_axis;         // unit vector in representation space
  Matrix components;                       // d x n_components, orthogonal to parity_axis
  std::vector<double> explained_variance;  // fraction of total variance per component
  std::vector<std::string> state_labels;
  Matrix coordinates;  // n_states x (1 + n_components): parity coordinate, then PCs
};

// Parity axis = normalized difference of parity-class means; remaining
// components are principal directions of the parity-orthogonalized per-state
// means.
PcaDecomposition pca_from_state_means(const Matrix& means, std::span<const int> parities,
                                      std::span<const std::string> labels, int n_components);

PcaDecomposition pca_decomposition(const ModelConfig& cfg, const Params& params,
                                   const Corpus& corpus, int layer, int n_components = 2,
                                   int n_threads = 0);

}  // namespace stw
