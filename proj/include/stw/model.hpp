#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stw/rng.hpp"

namespace stw {

enum class PositionalScheme { Rotary, Learned };
enum class CaptureMode { None, Resid, ResidAttn };
enum class LossNormalization { Sum, Mean };
enum class AuxTarget { Parity, ParityAction };

std::string to_string(PositionalScheme s);
PositionalScheme positional_from_string(const std::string& s);

// Auxiliary linear classifier on the residual stream at one layer boundary,
// trained jointly with the model under a weighted extra loss term.
struct AuxHeadConfig {
  int layer = 2;
  AuxTarget target = AuxTarget::Parity;
  int n_classes = 2;  // 2 for parity, 2 * |group| for (parity, action)
  double weight = 0.1;

  bool operator==(const AuxHeadConfig&) const = default;
};

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_positions = 128;
  PositionalScheme positional = PositionalScheme::Rotary;
  bool tied_embeddings = false;
  double ln_eps = 1e-5;
  uint64_t init_seed = 0;
  std::optional<AuxHeadConfig> aux;

  int d_head() const { return d_model / n_heads; }
  void validate() const;
  long long param_count() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LayerParamsT {
  std::vector<S> ln1_g, ln1_b;
  std::vector<S> wq, wk, wv, wo;  // d x d
  std::vector<S> bq, bk, bv, bo;
  std::vector<S> ln2_g, ln2_b;
  std::vector<S> w_up;    // d x m
  std::vector<S> b_up;    // m
  std::vector<S> w_down;  // m x d
  std::vector<S> b_down;  // d
};

template <typename S>
struct ParamsT {
  std::vector<S> embed;      // V x d
  std::vector<S> pos_embed;  // P x d, learned scheme only
  std::vector<LayerParamsT<S>> layers;
  std::vector<S> lnf_g, lnf_b;
  std::vector<S> unembed;    // d x V, untied only
  std::vector<S> unembed_b;  // V, untied only
  std::vector<S> aux_w;      // d x n_aux_classes
  std::vector<S> aux_b;
};

using Params = ParamsT<float>;

// Canonical tensor enumeration shared by the optimizer, serialization and
// reductions. fn(name, vector&, decays): decays marks 2-D weights that receive
// weight decay.
template <typename S, typename Fn>
void for_each_tensor(ParamsT<S>& p, Fn&& fn) {
  fn("embed", p.embed, true);
  if (!p.pos_embed.empty()) fn("pos_embed", p.pos_embed, true);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    auto& lp = p.layers[l];
    std::string base = "layers." + std::to_string(l) + ".";
    fn(base + "ln1_g", lp.ln1_g, false);
    fn(base + "ln1_b", lp.ln1_b, false);
    fn(base + "wq", lp.wq, true);
    fn(base + "wk", lp.wk, true);
    fn(base + "wv", lp.wv, true);
    fn(base + "wo", lp.wo, true);
    fn(base + "bq", lp.bq, false);
    fn(base + "bk", lp.bk, false);
    fn(base + "bv", lp.bv, false);
    fn(base + "bo", lp.bo, false);
    fn(base + "ln2_g", lp.ln2_g, false);
    fn(base + "ln2_b", lp.ln2_b, false);
    fn(base + "w_up", lp.w_up, true);
    fn(base + "b_up", lp.b_up, false);
    fn(base + "w_down", lp.w_down, true);
    fn(base + "b_down", lp.b_down, false);
  }
  fn("lnf_g", p.lnf_g, false);
  fn("lnf_b", p.lnf_b, false);
  if (!p.unembed.empty()) fn("unembed", p.unembed, true);
  if (!p.unembed_b.empty()) fn("unembed_b", p.unembed_b, false);
  if (!p.aux_w.empty()) fn("aux_w", p.aux_w, true);
  if (!p.aux_b.empty()) fn("aux_b", p.aux_b, false);
}

template <typename S>
ParamsT<S> init_model_t(const ModelConfig& cfg);
Params init_model(const ModelConfig& cfg);

template <typename S>
ParamsT<S> zero_grads_like(const ModelConfig& cfg);

template <typename S>
bool all_finite(const ParamsT<S>& p);

// Residual-stream edit applied at one layer boundary before deeper layers run.
// Boundary 0 is the post-embedding stream, boundary L the pre-unembedding one.
// Rows, when non-empty, hold (t1 - t0 + 1) * d_model values.
struct PatchEdit {
  int layer = 0;
  int t0 = 0, t1 = 0;  // inclusive position range
  bool zeros = false;
  std::vector<float> rows;
};

struct PatchSpec {
  std::vector<PatchEdit> edits;
  bool empty() const { return edits.empty(); }
};

// Captured h_{t,l} for every boundary plus per-(layer, head) attention rows.
struct ForwardTrace {
  int T = 0, L = 0, H = 0, d = 0;
  std::vector<float> resid;  // (L+1) * T * d
  std::vector<float> attn;   // L * H * T * T, rows causal and stochastic

  const float* resid_at(int t, int l) const {
    return resid.data() + (static_cast<size_t>(l) * T + t) * d;
  }
  float attn_at(int l, int h, int i, int j) const {
    return attn[((static_cast<size_t>(l) * H + h) * T + i) * T + j];
  }
};

// Single-sequence forward pass; returns logits (T x vocab). The patch, when
// given, is applied to the residual stream at the stated boundaries.
std::vector<float> forward(const ModelConfig& cfg, const Params& params,
                           std::span<const int> tokens, CaptureMode capture = CaptureMode::None,
                           ForwardTrace* trace = nullptr, const PatchSpec* patch = nullptr);

// Forward that restarts from a captured boundary: takes ownership of resid
// rows (T x d) at boundary `layer` and runs the remaining blocks, returning
// final-position logits only. Used by the patching grids, where all layers
// below the edit are unchanged.
std::vector<float> forward_from_boundary(const ModelConfig& cfg, const Params& params,
                                         std::vector<float> resid, int layer, int T);

// Per-position NLL of the targeted positions. targets[t] < 0 means no loss.
struct LossResult {
  double value = 0.0;
  int targeted = 0;
};
LossResult sequence_nll(std::span<const float> logits, int T, int vocab,
                        std::span<const int> targets, LossNormalization norm);

// ---- training-side batch interface (templated over float/double) --------------

struct PreparedBatch {
  int B = 0, T = 0;
  std::vector<int> tokens;      // B x T, padded with token 0 (never targeted)
  std::vector<int> targets;     // B x T, -1 where no loss
  std::vector<int> aux_labels;  // B x T, -1 where no aux loss; empty if unused
};

template <typename S>
struct SeqWorkspace;  // defined in model.cpp; opaque to callers

template <typename S>
struct GradContext {
  GradContext(const ModelConfig& cfg);
  ~GradContext();
  GradContext(GradContext&&) noexcept;
  GradContext& operator=(GradContext&&) = delete;

  ModelConfig cfg;
  ParamsT<S> grads;
  SeqWorkspace<S>* ws;
};

// Forward + reverse over [b0, b1) of the batch, accumulating into ctx.grads.
// scale / aux_scale multiply the per-position dlogits (1/count for mean
// normalization). Returns the summed NLL (main, aux) over the slice.
template <typename S>
std::pair<double, double> grad_batch_slice(const ModelConfig& cfg, const ParamsT<S>& params,
                                           const PreparedBatch& batch, int b0, int b1,
                                           double scale, double aux_scale, GradContext<S>& ctx);

// Loss only (no gradients); same conventions as grad_batch_slice.
template <typename S>
std::pair<double, double> loss_batch_slice(const ModelConfig& cfg, const ParamsT<S>& params,
                                           const PreparedBatch& batch, int b0, int b1,
                                           GradContext<S>& ctx);

extern template struct GradContext<float>;
extern template struct GradContext<double>;

}  // namespace stw
