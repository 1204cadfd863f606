#include "stw/probe.hpp"

#include <cmath>
#include <stdexcept>

#include "stw/linalg.hpp"
#include "stw/parallel.hpp"

namespace stw {

ProbeData collect_probe_data(const ModelConfig& cfg, const Params& params, const Corpus& corpus,
                             int layer, PositionPolicy policy, int max_docs, int n_threads) {
  if (layer < 0 || layer > cfg.n_layers)
    throw std::invalid_argument("collect_probe_data: layer out of range");
  if (corpus.mode != CorpusMode::StatePrediction)
    throw std::invalid_argument("collect_probe_data: corpus must be in state-prediction mode");
  const int n_docs = max_docs > 0 ? std::min(max_docs, corpus.size()) : corpus.size();
  if (n_docs == 0) throw std::invalid_argument("collect_probe_data: empty corpus");

  const int n_states = static_cast<int>(enumerate_group(corpus.group_degree).size());
  std::vector<int> row_of_doc(static_cast<size_t>(n_docs) + 1, 0);
  for (int i = 0; i < n_docs; ++i) {
    int len = corpus.docs[static_cast<size_t>(i)].length();
    row_of_doc[static_cast<size_t>(i) + 1] =
        row_of_doc[static_cast<size_t>(i)] + (policy == PositionPolicy::LastToken ? 1 : len);
  }
  const int n_rows = row_of_doc[static_cast<size_t>(n_docs)];

  ProbeData data;
  data.X = Matrix(n_rows, cfg.d_model);
  data.y_state.assign(static_cast<size_t>(n_rows), -1);
  data.y_parity.assign(static_cast<size_t>(n_rows), -1);
  data.n_state_classes = n_states;

  // Parity of each state token id (ids < n! are the group elements in order).
  std::vector<int> parity_of(static_cast<size_t>(n_states));
  {
    auto group = enumerate_group(corpus.group_degree);
    for (int s = 0; s < n_states; ++s) parity_of[static_cast<size_t>(s)] = group[static_cast<size_t>(s)].parity();
  }

  // validate targets up front; worker threads must not throw
  for (int i = 0; i < n_docs; ++i)
    for (int y : corpus.docs[static_cast<size_t>(i)].target_ids)
      if (y < 0 || y >= n_states)
        throw std::invalid_argument("collect_probe_data: document without full state targets");

  parallel_for(n_docs, n_threads, [&](int i) {
    const Document& doc = corpus.docs[static_cast<size_t>(i)];
    ForwardTrace trace;
    forward(cfg, params, doc.input_ids, CaptureMode::Resid, &trace);
    const int len = doc.length();
    auto emit = [&](int row, int t) {
      const float* h = trace.resid_at(t, layer);
      for (int c = 0; c < cfg.d_model; ++c) data.X.at(row, c) = h[c];
      int y = doc.target_ids[static_cast<size_t>(t)];
      data.y_state[static_cast<size_t>(row)] = y;
      data.y_parity[static_cast<size_t>(row)] = parity_of[static_cast<size_t>(y)];
    };
    if (policy == PositionPolicy::LastToken) {
      emit(row_of_doc[static_cast<size_t>(i)], len - 1);
    } else {
      for (int t = 0; t < len; ++t) emit(row_of_doc[static_cast<size_t>(i)] + t, t);
    }
  });
  return data;
}

namespace {

// mean CE + 0.5 * l2 * ||W||^2, gradient written into (gW, gb); returns loss.
double probe_loss_grad(const Matrix& X, std::span<const int> y, const Matrix& W,
                       const std::vector<double>& b, double l2, Matrix& gW,
                       std::vector<double>& gb, Matrix* probs_out = nullptr) {
  const int n = X.rows, d = X.cols, C = W.cols;
  std::fill(gW.data.begin(), gW.data.end(), 0.0);
  std::fill(gb.begin(), gb.end(), 0.0);
  double loss = 0.0;
  std::vector<double> z(static_cast<size_t>(C));
  for (int i = 0; i < n; ++i) {
    const double* xi = X.data.data() + static_cast<size_t>(i) * d;
    for (int c = 0; c < C; ++c) z[static_cast<size_t>(c)] = b[static_cast<size_t>(c)];
    for (int k = 0; k < d; ++k) {
      const double xk = xi[k];
      const double* wrow = W.data.data() + static_cast<size_t>(k) * C;
      for (int c = 0; c < C; ++c) z[static_cast<size_t>(c)] += xk * wrow[c];
    }
    double maxv = z[0];
    for (int c = 1; c < C; ++c) maxv = std::max(maxv, z[static_cast<size_t>(c)]);
    double denom = 0.0;
    for (int c = 0; c < C; ++c) {
      z[static_cast<size_t>(c)] = std::exp(z[static_cast<size_t>(c)] - maxv);
      denom += z[static_cast<size_t>(c)];
    }
    const int yi = y[static_cast<size_t>(i)];
    loss += -std::log(z[static_cast<size_t>(yi)] / denom);
    for (int c = 0; c < C; ++c) {
      double p = z[static_cast<size_t>(c)] / denom;
      if (probs_out) probs_out->at(i, c) = p;
      double g = (p - (c == yi ? 1.0 : 0.0)) / n;
      gb[static_cast<size_t>(c)] += g;
      for (int k = 0; k < d; ++k) gW.at(k, c) += g * xi[k];
    }
  }
  loss /= n;
  for (size_t i = 0; i < gW.data.size(); ++i) {
    gW.data[i] += l2 * W.data[i];
    loss += 0.5 * l2 * W.data[i] * W.data[i];
  }
  return loss;
}

}  // namespace

ProbeFit train_probe(const Matrix& X_train, std::span<const int> y_train, const Matrix& X_eval,
                     std::span<const int> y_eval, int n_classes, const ProbeSolverConfig& cfg) {
  if (X_train.rows < 1 || static_cast<size_t>(X_train.rows) != y_train.size())
    throw std::invalid_argument("train_probe: bad training data");
  bool multi_class = false;
  for (size_t i = 1; i < y_train.size(); ++i)
    if (y_train[i] != y_train[0]) multi_class = true;
  if (!multi_class) throw std::invalid_argument("train_probe: single-class training data");

  const int d = X_train.cols, C = n_classes;
  ProbeFit fit;
  fit.probe.W = Matrix(d, C, 0.0);
  fit.probe.b.assign(static_cast<size_t>(C), 0.0);

  Matrix gW(d, C), mW(d, C), vW(d, C);
  std::vector<double> gb(static_cast<size_t>(C)), mb(static_cast<size_t>(C)), vb(static_cast<size_t>(C));
  const double b1 = 0.9, b2 = 0.999, eps = 1e-9;
  int it = 0;
  double sup = 0.0;
  for (it = 1; it <= cfg.max_iters; ++it) {
    probe_loss_grad(X_train, y_train, fit.probe.W, fit.probe.b, cfg.l2_penalty, gW, gb);
    sup = 0.0;
    for (double g : gW.data) sup = std::max(sup, std::abs(g));
    for (double g : gb) sup = std::max(sup, std::abs(g));
    if (sup < cfg.tol) break;
    const double bc1 = 1.0 - std::pow(b1, it), bc2 = 1.0 - std::pow(b2, it);
    for (size_t i = 0; i < gW.data.size(); ++i) {
      mW.data[i] = b1 * mW.data[i] + (1 - b1) * gW.data[i];
      vW.data[i] = b2 * vW.data[i] + (1 - b2) * gW.data[i] * gW.data[i];
      fit.probe.W.data[i] -= cfg.lr * (mW.data[i] / bc1) / (std::sqrt(vW.data[i] / bc2) + eps);
    }
    for (size_t i = 0; i < gb.size(); ++i) {
      mb[i] = b1 * mb[i] + (1 - b1) * gb[i];
      vb[i] = b2 * vb[i] + (1 - b2) * gb[i] * gb[i];
      fit.probe.b[i] -= cfg.lr * (mb[i] / bc1) / (std::sqrt(vb[i] / bc2) + eps);
    }
  }
  fit.iters = std::min(it, cfg.max_iters);
  fit.grad_sup_norm = sup;

  if (X_eval.rows > 0) {
    int correct = 0;
    double prob_sum = 0.0;
    for (int i = 0; i < X_eval.rows; ++i) {
      auto p = probe_predict_proba(fit.probe, X_eval.data.data() + static_cast<size_t>(i) * d);
      int argmax = 0;
      for (int c = 1; c < C; ++c)
        if (p[static_cast<size_t>(c)] > p[static_cast<size_t>(argmax)]) argmax = c;
      if (argmax == y_eval[static_cast<size_t>(i)]) ++correct;
      prob_sum += p[static_cast<size_t>(y_eval[static_cast<size_t>(i)])];
    }
    fit.heldout_accuracy = static_cast<double>(correct) / X_eval.rows;
    fit.heldout_mean_correct_prob = prob_sum / X_eval.rows;
  }
  return fit;
}

ProbeFit train_probe_split(const Matrix& X, std::span<const int> y, int n_classes,
                           const ProbeSolverConfig& cfg) {
  const int n = X.rows;
  if (n < 5) throw std::invalid_argument("train_probe_split: too few rows");
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng = Rng::derive(cfg.seed, /*stream=*/11);
  rng.shuffle(order);
  const int n_train = n * 4 / 5;
  Matrix Xtr(n_train, X.cols), Xev(n - n_train, X.cols);
  std::vector<int> ytr, yev;
  for (int i = 0; i < n; ++i) {
    const int src = order[static_cast<size_t>(i)];
    if (i < n_train) {
      std::copy_n(X.data.begin() + static_cast<size_t>(src) * X.cols, X.cols,
                  Xtr.data.begin() + static_cast<size_t>(i) * X.cols);
      ytr.push_back(y[static_cast<size_t>(src)]);
    } else {
      std::copy_n(X.data.begin() + static_cast<size_t>(src) * X.cols, X.cols,
                  Xev.data.begin() + static_cast<size_t>(i - n_train) * X.cols);
      yev.push_back(y[static_cast<size_t>(src)]);
    }
  }
  return train_probe(Xtr, ytr, Xev, yev, n_classes, cfg);
}

std::vector<double> probe_predict_proba(const Probe& probe, const double* x) {
  const int d = probe.W.rows, C = probe.W.cols;
  std::vector<double> z(probe.b.begin(), probe.b.end());
  for (int k = 0; k < d; ++k) {
    const double xk = x[k];
    const double* wrow = probe.W.data.data() + static_cast<size_t>(k) * C;
    for (int c = 0; c < C; ++c) z[static_cast<size_t>(c)] += xk * wrow[c];
  }
  double maxv = z[0];
  for (double v : z) maxv = std::max(maxv, v);
  double denom = 0.0;
  for (auto& v : z) {
    v = std::exp(v - maxv);
    denom += v;
  }
  for (auto& v : z) v /= denom;
  return z;
}

namespace {

// One forward per document; features for every layer boundary at once.
struct LayerFeatures {
  std::vector<Matrix> X;  // per layer boundary
  std::vector<int> y_state, y_parity;
};

LayerFeatures collect_last_token_features(const ModelConfig& cfg, const Params& params,
                                          const Corpus& corpus, std::span<const int> doc_ids,
                                          int n_threads) {
  LayerFeatures f;
  f.X.assign(static_cast<size_t>(cfg.n_layers) + 1, Matrix(static_cast<int>(doc_ids.size()), cfg.d_model));
  f.y_state.assign(doc_ids.size(), -1);
  f.y_parity.assign(doc_ids.size(), -1);
  auto group = enumerate_group(corpus.group_degree);
  std::vector<int> ids(doc_ids.begin(), doc_ids.end());
  parallel_for(static_cast<int>(ids.size()), n_threads, [&](int i) {
    const Document& doc = corpus.docs[static_cast<size_t>(ids[static_cast<size_t>(i)])];
    ForwardTrace trace;
    forward(cfg, params, doc.input_ids, CaptureMode::Resid, &trace);
    const int t = doc.length() - 1;
    for (int l = 0; l <= cfg.n_layers; ++l) {
      const float* h = trace.resid_at(t, l);
      for (int c = 0; c < cfg.d_model; ++c) f.X[static_cast<size_t>(l)].at(i, c) = h[c];
    }
    int y = doc.target_ids[static_cast<size_t>(t)];
    f.y_state[static_cast<size_t>(i)] = y;
    f.y_parity[static_cast<size_t>(i)] = group[static_cast<size_t>(y)].parity();
  });
  return f;
}

}  // namespace

ProbeCurves probe_curves(const ModelConfig& cfg, const Params& params, const Corpus& corpus,
                         uint64_t seed, int n_train_docs, int n_eval_docs,
                         const ProbeSolverConfig& solver, int n_threads) {
  if (corpus.mode != CorpusMode::StatePrediction)
    throw std::invalid_argument("probe_curves: corpus must be in state-prediction mode");
  const int need = n_train_docs + n_eval_docs;
  if (corpus.size() < need) throw std::invalid_argument("probe_curves: not enough documents");

  std::vector<int> order(static_cast<size_t>(corpus.size()));
  for (int i = 0; i < corpus.size(); ++i) order[static_cast<size_t>(i)] = i;
  Rng rng = Rng::derive(seed, /*stream=*/12);
  rng.shuffle(order);
  std::span<const int> train_ids(order.data(), static_cast<size_t>(n_train_docs));
  std::span<const int> eval_ids(order.data() + n_train_docs, static_cast<size_t>(n_eval_docs));

  LayerFeatures train = collect_last_token_features(cfg, params, corpus, train_ids, n_threads);
  LayerFeatures eval = collect_last_token_features(cfg, params, corpus, eval_ids, n_threads);
  const int n_states = static_cast<int>(enumerate_group(corpus.group_degree).size());

  ProbeCurves curves;
  curves.n_train = n_train_docs;
  curves.n_eval = n_eval_docs;
  for (int l = 0; l <= cfg.n_layers; ++l) {
    ProbeFit s = train_probe(train.X[static_cast<size_t>(l)], train.y_state,
                             eval.X[static_cast<size_t>(l)], eval.y_state, n_states, solver);
    ProbeFit p = train_probe(train.X[static_cast<size_t>(l)], train.y_parity,
                             eval.X[static_cast<size_t>(l)], eval.y_parity, 2, solver);
    curves.state_acc.push_back(s.heldout_accuracy);
    curves.parity_acc.push_back(p.heldout_accuracy);
  }
  return curves;
}

Matrix probe_by_length(const ModelConfig& cfg, const Params& params, int degree,
                       std::span<const int> lengths, int n_train_seqs, int n_eval_seqs,
                       uint64_t seed, const ProbeSolverConfig& solver, int n_threads) {
  auto group = enumerate_group(degree);
  const int n_states = static_cast<int>(group.size());
  Matrix out(cfg.n_layers + 1, static_cast<int>(lengths.size()), 0.0);

  for (size_t li = 0; li < lengths.size(); ++li) {
    const int len = lengths[li];
    if (len < 1 || len > cfg.max_positions)
      throw std::invalid_argument("probe_by_length: length out of range");
    const int n_total = n_train_seqs + n_eval_seqs;
    std::vector<std::vector<int>> token_seqs(static_cast<size_t>(n_total));
    std::vector<int> labels(static_cast<size_t>(n_total));
    for (int i = 0; i < n_total; ++i) {
      Rng rng = Rng::derive(seed, /*stream=*/13 + li, static_cast<uint64_t>(i));
      std::vector<Perm> actions;
      std::vector<int> toks;
      for (int t = 0; t < len; ++t) {
        int k = static_cast<int>(rng.below(group.size()));
        actions.push_back(group[static_cast<size_t>(k)]);
        toks.push_back(k);
      }
      token_seqs[static_cast<size_t>(i)] = std::move(toks);
      auto states = cumulative_states(actions);
      // state index within the lexicographic enumeration == vocab id
      for (int s = 0; s < n_states; ++s)
        if (group[static_cast<size_t>(s)] == states.back()) labels[static_cast<size_t>(i)] = s;
    }

    std::vector<Matrix> feats(static_cast<size_t>(cfg.n_layers) + 1,
                              Matrix(n_total, cfg.d_model));
    parallel_for(n_total, n_threads, [&](int i) {
      ForwardTrace trace;
      forward(cfg, params, token_seqs[static_cast<size_t>(i)], CaptureMode::Resid, &trace);
      for (int l = 0; l <= cfg.n_layers; ++l) {
        const float* h = trace.resid_at(len - 1, l);
        for (int c = 0; c < cfg.d_model; ++c) feats[static_cast<size_t>(l)].at(i, c) = h[c];
      }
    });

    for (int l = 0; l <= cfg.n_layers; ++l) {
      Matrix Xtr(n_train_seqs, cfg.d_model), Xev(n_eval_seqs, cfg.d_model);
      std::copy_n(feats[static_cast<size_t>(l)].data.begin(),
                  static_cast<size_t>(n_train_seqs) * cfg.d_model, Xtr.data.begin());
      std::copy_n(feats[static_cast<size_t>(l)].data.begin() + static_cast<size_t>(n_train_seqs) * cfg.d_model,
                  static_cast<size_t>(n_eval_seqs) * cfg.d_model, Xev.data.begin());
      std::span<const int> ytr(labels.data(), static_cast<size_t>(n_train_seqs));
      std::span<const int> yev(labels.data() + n_train_seqs, static_cast<size_t>(n_eval_seqs));
      ProbeFit fit = train_probe(Xtr, ytr, Xev, yev, n_states, solver);
      out.at(l, static_cast<int>(li)) = fit.heldout_mean_correct_prob;
    }
  }
  return out;
}

PcaDecomposition pca_from_state_means(const Matrix& means, std::span<const int> parities,
                                      std::span<const std::string> labels, int n_components) {
  const int n = means.rows, d = means.cols;
  if (n < 2 || static_cast<size_t>(n) != parities.size())
    throw std::invalid_argument("pca_from_state_means: need >= 2 state means with parities");
  if (n_components < 1 || n_components > d)
    throw std::invalid_argument("pca_from_state_means: bad component count");

  PcaDecomposition out;
  out.state_labels.assign(labels.begin(), labels.end());

  // parity axis: difference of parity-class means
  std::vector<double> mean_even(static_cast<size_t>(d), 0.0), mean_odd(static_cast<size_t>(d), 0.0);
  int n_even = 0, n_odd = 0;
  for (int i = 0; i < n; ++i) {
    auto& dst = parities[static_cast<size_t>(i)] == 0 ? mean_even : mean_odd;
    (parities[static_cast<size_t>(i)] == 0 ? n_even : n_odd)++;
    for (int c = 0; c < d; ++c) dst[static_cast<size_t>(c)] += means.at(i, c);
  }
  if (n_even == 0 || n_odd == 0)
    throw std::invalid_argument("pca_from_state_means: need both parity classes");
  double norm = 0.0;
  out.parity_axis.assign(static_cast<size_t>(d), 0.0);
  for (int c = 0; c < d; ++c) {
    out.parity_axis[static_cast<size_t>(c)] =
        mean_odd[static_cast<size_t>(c)] / n_odd - mean_even[static_cast<size_t>(c)] / n_even;
    norm += out.parity_axis[static_cast<size_t>(c)] * out.parity_axis[static_cast<size_t>(c)];
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) throw std::invalid_argument("pca_from_state_means: degenerate parity axis");
  for (auto& v : out.parity_axis) v /= norm;

  // center, record total variance, then strip the parity direction
  std::vector<double> grand(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) grand[static_cast<size_t>(c)] += means.at(i, c) / n;
  Matrix centered(n, d);
  double total_var = 0.0;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      centered.at(i, c) = means.at(i, c) - grand[static_cast<size_t>(c)];
      total_var += centered.at(i, c) * centered.at(i, c);
    }
  total_var /= n;

  Matrix stripped = centered;
  std::vector<double> parity_coord(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int c = 0; c < d; ++c) dot += centered.at(i, c) * out.parity_axis[static_cast<size_t>(c)];
    parity_coord[static_cast<size_t>(i)] = dot;
    for (int c = 0; c < d; ++c) stripped.at(i, c) -= dot * out.parity_axis[static_cast<size_t>(c)];
  }

  Matrix cov(d, d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a) {
      const double va = stripped.at(i, a);
      if (va == 0.0) continue;
      for (int b = 0; b < d; ++b) cov.at(a, b) += va * stripped.at(i, b) / n;
    }

  std::vector<double> evals;
  Matrix evecs;
  symmetric_eigen(cov, evals, evecs);

  out.components = Matrix(d, n_components);
  out.explained_variance.resize(static_cast<size_t>(n_components));
  for (int j = 0; j < n_components; ++j) {
    for (int c = 0; c < d; ++c) out.components.at(c, j) = evecs.at(c, j);
    out.explained_variance[static_cast<size_t>(j)] =
        total_var > 0 ? std::max(0.0, evals[static_cast<size_t>(j)]) / total_var : 0.0;
  }

  out.coordinates = Matrix(n, 1 + n_components);
  for (int i = 0; i < n; ++i) {
    out.coordinates.at(i, 0) = parity_coord[static_cast<size_t>(i)];
    for (int j = 0; j < n_components; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += stripped.at(i, c) * out.components.at(c, j);
      out.coordinates.at(i, 1 + j) = dot;
    }
  }
  return out;
}

PcaDecomposition pca_decomposition(const ModelConfig& cfg, const Params& params,
                                   const Corpus& corpus, int layer, int n_components,
                                   int n_threads) {
  if (layer < 0 || layer > cfg.n_layers)
    throw std::invalid_argument("pca_decomposition: layer out of range");
  ProbeData data = collect_probe_data(cfg, params, corpus, layer, PositionPolicy::LastToken, 0,
                                      n_threads);
  const int n_states = data.n_state_classes;
  Matrix sums(n_states, cfg.d_model, 0.0);
  std::vector<int> counts(static_cast<size_t>(n_states), 0);
  for (int i = 0; i < data.X.rows; ++i) {
    const int s = data.y_state[static_cast<size_t>(i)];
    counts[static_cast<size_t>(s)]++;
    for (int c = 0; c < cfg.d_model; ++c) sums.at(s, c) += data.X.at(i, c);
  }
  auto group = enumerate_group(corpus.group_degree);
  std::vector<int> parities;
  std::vector<std::string> labels;
  for (int s = 0; s < n_states; ++s) {
    if (counts[static_cast<size_t>(s)] == 0)
      throw std::invalid_argument("pca_decomposition: state " + group[static_cast<size_t>(s)].str() +
                                  " unobserved in corpus");
    for (int c = 0; c < cfg.d_model; ++c) sums.at(s, c) /= counts[static_cast<size_t>(s)];
    parities.push_back(group[static_cast<size_t>(s)].parity());
    labels.push_back(group[static_cast<size_t>(s)].str());
  }
  return pca_from_state_means(sums, parities, labels, n_components);
}

}  // namespace stw
