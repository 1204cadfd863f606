#include "stw/model.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "stw/linalg.hpp"

namespace stw {

std::string to_string(PositionalScheme s) {
  return s == PositionalScheme::Rotary ? "rotary" : "learned";
}

PositionalScheme positional_from_string(const std::string& s) {
  if (s == "rotary") return PositionalScheme::Rotary;
  if (s == "learned") return PositionalScheme::Learned;
  throw std::invalid_argument("unknown positional scheme: " + s);
}

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  if (positional == PositionalScheme::Rotary && d_head() % 2 != 0)
    throw std::invalid_argument("ModelConfig: rotary needs an even head dimension");
  if (d_mlp < 1) throw std::invalid_argument("ModelConfig: d_mlp must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (max_positions < 1) throw std::invalid_argument("ModelConfig: max_positions must be >= 1");
  if (ln_eps <= 0) throw std::invalid_argument("ModelConfig: ln_eps must be positive");
  if (aux) {
    if (aux->layer < 0 || aux->layer > n_layers)
      throw std::invalid_argument("ModelConfig: aux layer out of range");
    if (aux->n_classes < 2) throw std::invalid_argument("ModelConfig: aux needs >= 2 classes");
  }
}

long long ModelConfig::param_count() const {
  const long long d = d_model, m = d_mlp, V = vocab_size;
  long long n = V * d;                                     // embed
  if (positional == PositionalScheme::Learned) n += static_cast<long long>(max_positions) * d;
  n += n_layers * (4 * d * d + 4 * d + 2 * d * m + m + d + 4 * d);  // attn + mlp + two LNs
  n += 2 * d;                                              // final LN
  if (!tied_embeddings) n += d * V + V;
  if (aux) n += d * aux->n_classes + aux->n_classes;
  return n;
}

namespace {

template <typename S>
std::vector<S> normal_vec(Rng& rng, size_t n, double sigma) {
  std::vector<S> v(n);
  for (auto& x : v) x = static_cast<S>(rng.normal() * sigma);
  return v;
}

}  // namespace

template <typename S>
ParamsT<S> init_model_t(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  const size_t d = static_cast<size_t>(cfg.d_model);
  const size_t m = static_cast<size_t>(cfg.d_mlp);
  const size_t V = static_cast<size_t>(cfg.vocab_size);
  const double base = 0.02;
  const double resid_scale = base / std::sqrt(2.0 * cfg.n_layers);

  ParamsT<S> p;
  p.embed = normal_vec<S>(rng, V * d, base);
  if (cfg.positional == PositionalScheme::Learned)
    p.pos_embed = normal_vec<S>(rng, static_cast<size_t>(cfg.max_positions) * d, 0.01);
  p.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& lp : p.layers) {
    lp.ln1_g.assign(d, S(1));
    lp.ln1_b.assign(d, S(0));
    lp.wq = normal_vec<S>(rng, d * d, base);
    lp.wk = normal_vec<S>(rng, d * d, base);
    lp.wv = normal_vec<S>(rng, d * d, base);
    lp.wo = normal_vec<S>(rng, d * d, resid_scale);
    lp.bq.assign(d, S(0));
    lp.bk.assign(d, S(0));
    lp.bv.assign(d, S(0));
    lp.bo.assign(d, S(0));
    lp.ln2_g.assign(d, S(1));
    lp.ln2_b.assign(d, S(0));
    lp.w_up = normal_vec<S>(rng, d * m, base);
    lp.b_up.assign(m, S(0));
    lp.w_down = normal_vec<S>(rng, m * d, resid_scale);
    lp.b_down.assign(d, S(0));
  }
  p.lnf_g.assign(d, S(1));
  p.lnf_b.assign(d, S(0));
  if (!cfg.tied_embeddings) {
    p.unembed = normal_vec<S>(rng, d * V, base);
    p.unembed_b.assign(V, S(0));
  }
  if (cfg.aux) {
    p.aux_w = normal_vec<S>(rng, d * static_cast<size_t>(cfg.aux->n_classes), base);
    p.aux_b.assign(static_cast<size_t>(cfg.aux->n_classes), S(0));
  }
  return p;
}

Params init_model(const ModelConfig& cfg) { return init_model_t<float>(cfg); }

template <typename S>
ParamsT<S> zero_grads_like(const ModelConfig& cfg) {
  ParamsT<S> g = init_model_t<S>(cfg);
  for_each_tensor(g, [](const std::string&, std::vector<S>& v, bool) {
    std::fill(v.begin(), v.end(), S(0));
  });
  return g;
}

template <typename S>
bool all_finite(const ParamsT<S>& p) {
  bool ok = true;
  for_each_tensor(const_cast<ParamsT<S>&>(p), [&](const std::string&, std::vector<S>& v, bool) {
    for (S x : v)
      if (!std::isfinite(static_cast<double>(x))) ok = false;
  });
  return ok;
}

// ---- workspace ------------------------------------------------------------------

template <typename S>
struct SeqWorkspace {
  int T = 0;
  ModelConfig cfg;

  std::vector<S> resid;  // (L+1) x T x d
  struct LayerActs {
    std::vector<S> ln1_out, ln1_mean, ln1_rstd;
    std::vector<S> q, k, v;   // post-rotary q/k
    std::vector<S> probs;     // H x T x T
    std::vector<S> ctx;       // T x d
    std::vector<S> x_mid;     // T x d
    std::vector<S> ln2_out, ln2_mean, ln2_rstd;
    std::vector<S> h_pre, h_act, h_tanh;  // T x m; h_tanh caches tanh(u) for backward
  };
  std::vector<LayerActs> acts;
  std::vector<S> lnf_out, lnf_mean, lnf_rstd;
  std::vector<S> logits;      // T x V
  std::vector<S> aux_logits;  // T x C

  std::vector<S> rot_cos, rot_sin;  // T x d_head/2

  // backward scratch
  std::vector<S> dres, dtmp, dtmp2, dq, dk, dv, dctx, dmlp, dlogits, daux;

  void ensure(const ModelConfig& c, int T_new) {
    if (T_new > c.max_positions)
      throw std::invalid_argument("sequence longer than max_positions");
    bool same_cfg = c.n_layers == cfg.n_layers && c.d_model == cfg.d_model &&
                    c.n_heads == cfg.n_heads && c.d_mlp == cfg.d_mlp &&
                    c.vocab_size == cfg.vocab_size && c.positional == cfg.positional &&
                    c.aux.has_value() == cfg.aux.has_value() &&
                    (!c.aux || c.aux->n_classes == cfg.aux->n_classes);
    if (same_cfg && T_new <= T) return;
    cfg = c;
    T = std::max(T, T_new);
    const size_t Td = static_cast<size_t>(T) * cfg.d_model;
    const size_t Tm = static_cast<size_t>(T) * cfg.d_mlp;
    const size_t TV = static_cast<size_t>(T) * cfg.vocab_size;
    resid.assign(static_cast<size_t>(cfg.n_layers + 1) * Td, S(0));
    acts.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& a : acts) {
      a.ln1_out.assign(Td, S(0));
      a.ln1_mean.assign(static_cast<size_t>(T), S(0));
      a.ln1_rstd.assign(static_cast<size_t>(T), S(0));
      a.q.assign(Td, S(0));
      a.k.assign(Td, S(0));
      a.v.assign(Td, S(0));
      a.probs.assign(static_cast<size_t>(cfg.n_heads) * T * T, S(0));
      a.ctx.assign(Td, S(0));
      a.x_mid.assign(Td, S(0));
      a.ln2_out.assign(Td, S(0));
      a.ln2_mean.assign(static_cast<size_t>(T), S(0));
      a.ln2_rstd.assign(static_cast<size_t>(T), S(0));
      a.h_pre.assign(Tm, S(0));
      a.h_act.assign(Tm, S(0));
      a.h_tanh.assign(Tm, S(0));
    }
    lnf_out.assign(Td, S(0));
    lnf_mean.assign(static_cast<size_t>(T), S(0));
    lnf_rstd.assign(static_cast<size_t>(T), S(0));
    logits.assign(TV, S(0));
    if (cfg.aux) aux_logits.assign(static_cast<size_t>(T) * cfg.aux->n_classes, S(0));

    if (cfg.positional == PositionalScheme::Rotary) {
      const int half = cfg.d_head() / 2;
      rot_cos.assign(static_cast<size_t>(T) * half, S(0));
      rot_sin.assign(static_cast<size_t>(T) * half, S(0));
      for (int t = 0; t < T; ++t)
        for (int i = 0; i < half; ++i) {
          double theta = t * std::pow(10000.0, -2.0 * i / cfg.d_head());
          rot_cos[static_cast<size_t>(t) * half + i] = static_cast<S>(std::cos(theta));
          rot_sin[static_cast<size_t>(t) * half + i] = static_cast<S>(std::sin(theta));
        }
    }

    dres.assign(Td, S(0));
    dtmp.assign(std::max(Td, Tm), S(0));
    dtmp2.assign(Td, S(0));
    dq.assign(Td, S(0));
    dk.assign(Td, S(0));
    dv.assign(Td, S(0));
    dctx.assign(Td, S(0));
    dmlp.assign(Tm, S(0));
    dlogits.assign(TV, S(0));
    if (cfg.aux) daux.assign(static_cast<size_t>(T) * cfg.aux->n_classes, S(0));
  }
};

namespace {

template <typename S>
void layer_norm(const S* x, const S* g, const S* b, S* y, S* mean, S* rstd, int T, int d,
                double eps) {
  for (int t = 0; t < T; ++t) {
    const S* xr = x + static_cast<size_t>(t) * d;
    S* yr = y + static_cast<size_t>(t) * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += static_cast<double>(xr[i]);
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = static_cast<double>(xr[i]) - mu;
      var += c * c;
    }
    var /= d;
    double rs = 1.0 / std::sqrt(var + eps);
    mean[t] = static_cast<S>(mu);
    rstd[t] = static_cast<S>(rs);
    for (int i = 0; i < d; ++i)
      yr[i] = g[i] * static_cast<S>((static_cast<double>(xr[i]) - mu) * rs) + b[i];
  }
}

// dy -> dx (overwrites dx), accumulating parameter grads.
template <typename S>
void layer_norm_backward(const S* x, const S* g, const S* mean, const S* rstd, const S* dy,
                         S* dx, S* dg, S* db, int T, int d) {
  for (int t = 0; t < T; ++t) {
    const S* xr = x + static_cast<size_t>(t) * d;
    const S* dyr = dy + static_cast<size_t>(t) * d;
    S* dxr = dx + static_cast<size_t>(t) * d;
    const double mu = static_cast<double>(mean[t]);
    const double rs = static_cast<double>(rstd[t]);
    double sum_dyg = 0.0, sum_dyg_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
      double xhat = (static_cast<double>(xr[i]) - mu) * rs;
      double dyg = static_cast<double>(dyr[i]) * static_cast<double>(g[i]);
      sum_dyg += dyg;
      sum_dyg_xhat += dyg * xhat;
      dg[i] += static_cast<S>(static_cast<double>(dyr[i]) * xhat);
      db[i] += dyr[i];
    }
    sum_dyg /= d;
    sum_dyg_xhat /= d;
    for (int i = 0; i < d; ++i) {
      double xhat = (static_cast<double>(xr[i]) - mu) * rs;
      double dyg = static_cast<double>(dyr[i]) * static_cast<double>(g[i]);
      dxr[i] = static_cast<S>(rs * (dyg - sum_dyg - xhat * sum_dyg_xhat));
    }
  }
}

constexpr double kGeluC = 0.7978845608028653559;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// tanh-approximation GELU; the tanh value is cached at forward time and reused
// by the backward pass.
template <typename S>
S gelu_tanh(S x) {
  double xd = static_cast<double>(x);
  return static_cast<S>(std::tanh(kGeluC * (xd + kGeluA * xd * xd * xd)));
}

template <typename S>
S gelu_grad_cached(S x, S th_s) {
  double xd = static_cast<double>(x);
  double th = static_cast<double>(th_s);
  double sech2 = 1.0 - th * th;
  return static_cast<S>(0.5 * (1.0 + th) + 0.5 * xd * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * xd * xd));
}

template <typename S>
void add_bias(S* x, const S* b, int T, int d) {
  for (int t = 0; t < T; ++t) {
    S* r = x + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) r[i] += b[i];
  }
}

// NeoX-style rotary: the head vector is split into halves (x1, x2) rotated by
// position-dependent angles.
template <typename S>
void apply_rotary(S* qk, const S* cs, const S* sn, int T, int H, int dh, bool inverse) {
  const int half = dh / 2;
  const int d = H * dh;
  for (int t = 0; t < T; ++t) {
    const S* c = cs + static_cast<size_t>(t) * half;
    const S* s = sn + static_cast<size_t>(t) * half;
    for (int h = 0; h < H; ++h) {
      S* v = qk + static_cast<size_t>(t) * d + static_cast<size_t>(h) * dh;
      for (int i = 0; i < half; ++i) {
        S x1 = v[i], x2 = v[i + half];
        if (!inverse) {
          v[i] = x1 * c[i] - x2 * s[i];
          v[i + half] = x2 * c[i] + x1 * s[i];
        } else {
          v[i] = x1 * c[i] + x2 * s[i];
          v[i + half] = x2 * c[i] - x1 * s[i];
        }
      }
    }
  }
}

template <typename S>
void apply_patch_at_boundary(const ModelConfig& cfg, const PatchSpec* patch, int layer, S* resid_l,
                             int T) {
  if (!patch) return;
  for (const PatchEdit& e : patch->edits) {
    if (e.layer != layer) continue;
    if (e.t0 < 0 || e.t1 < e.t0 || e.t1 >= T) throw std::invalid_argument("PatchEdit: range out of bounds");
    const int n_rows = e.t1 - e.t0 + 1;
    if (!e.zeros && static_cast<int>(e.rows.size()) != n_rows * cfg.d_model)
      throw std::invalid_argument("PatchEdit: rows size mismatch");
    for (int t = e.t0; t <= e.t1; ++t) {
      S* row = resid_l + static_cast<size_t>(t) * cfg.d_model;
      if (e.zeros) {
        std::fill(row, row + cfg.d_model, S(0));
      } else {
        const float* src = e.rows.data() + static_cast<size_t>(t - e.t0) * cfg.d_model;
        for (int i = 0; i < cfg.d_model; ++i) row[i] = static_cast<S>(src[i]);
      }
    }
  }
}

// One transformer block: x_in = resid row l, x_out written to resid row l+1.
template <typename S>
void block_forward(const ModelConfig& cfg, const LayerParamsT<S>& lp,
                   typename SeqWorkspace<S>::LayerActs& a, const S* x_in, S* x_out, int T,
                   const S* rot_cos, const S* rot_sin) {
  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), m = cfg.d_mlp;
  layer_norm(x_in, lp.ln1_g.data(), lp.ln1_b.data(), a.ln1_out.data(), a.ln1_mean.data(),
             a.ln1_rstd.data(), T, d, cfg.ln_eps);
  matmul(a.ln1_out.data(), lp.wq.data(), a.q.data(), T, d, d);
  add_bias(a.q.data(), lp.bq.data(), T, d);
  matmul(a.ln1_out.data(), lp.wk.data(), a.k.data(), T, d, d);
  add_bias(a.k.data(), lp.bk.data(), T, d);
  matmul(a.ln1_out.data(), lp.wv.data(), a.v.data(), T, d, d);
  add_bias(a.v.data(), lp.bv.data(), T, d);
  if (cfg.positional == PositionalScheme::Rotary) {
    apply_rotary(a.q.data(), rot_cos, rot_sin, T, H, dh, false);
    apply_rotary(a.k.data(), rot_cos, rot_sin, T, H, dh, false);
  }

  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < H; ++h) {
    const size_t off = static_cast<size_t>(h) * dh;
    S* probs = a.probs.data() + static_cast<size_t>(h) * T * T;
    for (int i = 0; i < T; ++i) {
      const S* qi = a.q.data() + static_cast<size_t>(i) * d + off;
      S* prow = probs + static_cast<size_t>(i) * T;
      S maxv = std::numeric_limits<S>::lowest();
      for (int j = 0; j <= i; ++j) {
        const S* kj = a.k.data() + static_cast<size_t>(j) * d + off;
        S acc = S(0);
        for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        acc *= inv_sqrt;
        prow[j] = acc;
        maxv = std::max(maxv, acc);
      }
      S denom = S(0);
      for (int j = 0; j <= i; ++j) {
        prow[j] = std::exp(prow[j] - maxv);
        denom += prow[j];
      }
      const S inv_denom = S(1) / denom;
      for (int j = 0; j <= i; ++j) prow[j] *= inv_denom;
      for (int j = i + 1; j < T; ++j) prow[j] = S(0);

      S* ci = a.ctx.data() + static_cast<size_t>(i) * d + off;
      std::fill(ci, ci + dh, S(0));
      for (int j = 0; j <= i; ++j) {
        const S p = prow[j];
        const S* vj = a.v.data() + static_cast<size_t>(j) * d + off;
        for (int c = 0; c < dh; ++c) ci[c] += p * vj[c];
      }
    }
  }

  // x_mid = x_in + ctx * wo + bo
  matmul(a.ctx.data(), lp.wo.data(), a.x_mid.data(), T, d, d);
  for (int t = 0; t < T; ++t) {
    S* r = a.x_mid.data() + static_cast<size_t>(t) * d;
    const S* xi = x_in + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) r[i] += lp.bo[static_cast<size_t>(i)] + xi[i];
  }

  layer_norm(a.x_mid.data(), lp.ln2_g.data(), lp.ln2_b.data(), a.ln2_out.data(),
             a.ln2_mean.data(), a.ln2_rstd.data(), T, d, cfg.ln_eps);
  matmul(a.ln2_out.data(), lp.w_up.data(), a.h_pre.data(), T, d, m);
  add_bias(a.h_pre.data(), lp.b_up.data(), T, m);
  for (size_t i = 0; i < static_cast<size_t>(T) * m; ++i) {
    a.h_tanh[i] = gelu_tanh(a.h_pre[i]);
    a.h_act[i] = S(0.5) * a.h_pre[i] * (S(1) + a.h_tanh[i]);
  }
  matmul(a.h_act.data(), lp.w_down.data(), x_out, T, m, d);
  for (int t = 0; t < T; ++t) {
    S* r = x_out + static_cast<size_t>(t) * d;
    const S* xm = a.x_mid.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) r[i] += lp.b_down[static_cast<size_t>(i)] + xm[i];
  }
}

template <typename S>
void forward_seq(const ModelConfig& cfg, const ParamsT<S>& params, const int* tokens, int T,
                 SeqWorkspace<S>& ws, const PatchSpec* patch = nullptr) {
  ws.ensure(cfg, T);
  const int d = cfg.d_model, V = cfg.vocab_size;
  const size_t Td = static_cast<size_t>(ws.T) * d;

  S* resid0 = ws.resid.data();
  for (int t = 0; t < T; ++t) {
    if (tokens[t] < 0 || tokens[t] >= V) throw std::invalid_argument("forward: token id out of range");
    const S* e = params.embed.data() + static_cast<size_t>(tokens[t]) * d;
    S* r = resid0 + static_cast<size_t>(t) * d;
    std::memcpy(r, e, sizeof(S) * d);
    if (cfg.positional == PositionalScheme::Learned) {
      const S* pe = params.pos_embed.data() + static_cast<size_t>(t) * d;
      for (int i = 0; i < d; ++i) r[i] += pe[i];
    }
  }
  apply_patch_at_boundary(cfg, patch, 0, resid0, T);

  for (int l = 0; l < cfg.n_layers; ++l) {
    S* x_in = ws.resid.data() + static_cast<size_t>(l) * Td;
    S* x_out = ws.resid.data() + static_cast<size_t>(l + 1) * Td;
    block_forward(cfg, params.layers[static_cast<size_t>(l)], ws.acts[static_cast<size_t>(l)],
                  x_in, x_out, T, ws.rot_cos.data(), ws.rot_sin.data());
    apply_patch_at_boundary(cfg, patch, l + 1, x_out, T);
  }

  const S* resid_L = ws.resid.data() + static_cast<size_t>(cfg.n_layers) * Td;
  layer_norm(resid_L, params.lnf_g.data(), params.lnf_b.data(), ws.lnf_out.data(),
             ws.lnf_mean.data(), ws.lnf_rstd.data(), T, d, cfg.ln_eps);
  if (cfg.tied_embeddings) {
    matmul_bt(ws.lnf_out.data(), params.embed.data(), ws.logits.data(), T, d, V);
  } else {
    matmul(ws.lnf_out.data(), params.unembed.data(), ws.logits.data(), T, d, V);
    add_bias(ws.logits.data(), params.unembed_b.data(), T, V);
  }

  if (cfg.aux) {
    const S* resid_aux = ws.resid.data() + static_cast<size_t>(cfg.aux->layer) * Td;
    const int C = cfg.aux->n_classes;
    matmul(resid_aux, params.aux_w.data(), ws.aux_logits.data(), T, d, C);
    add_bias(ws.aux_logits.data(), params.aux_b.data(), T, C);
  }
}

template <typename S>
void block_backward(const ModelConfig& cfg, const LayerParamsT<S>& lp, LayerParamsT<S>& gp,
                    const typename SeqWorkspace<S>::LayerActs& a, const S* x_in,
                    SeqWorkspace<S>& ws, int T) {
  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), m = cfg.d_mlp;
  // ws.dres on entry: d(x_out). On exit: d(x_in).

  // mlp branch
  for (int t = 0; t < T; ++t) {
    const S* dr = ws.dres.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) gp.b_down[static_cast<size_t>(i)] += dr[i];
  }
  matmul_at(a.h_act.data(), ws.dres.data(), gp.w_down.data(), m, T, d, true);
  matmul_bt(ws.dres.data(), lp.w_down.data(), ws.dmlp.data(), T, d, m);
  for (size_t i = 0; i < static_cast<size_t>(T) * m; ++i)
    ws.dmlp[i] *= gelu_grad_cached(a.h_pre[i], a.h_tanh[i]);
  for (int t = 0; t < T; ++t) {
    const S* dm = ws.dmlp.data() + static_cast<size_t>(t) * m;
    for (int i = 0; i < m; ++i) gp.b_up[static_cast<size_t>(i)] += dm[i];
  }
  matmul_at(a.ln2_out.data(), ws.dmlp.data(), gp.w_up.data(), d, T, m, true);
  matmul_bt(ws.dmlp.data(), lp.w_up.data(), ws.dtmp.data(), T, m, d);
  // d(x_mid) = dres + LN2-backward(dtmp)
  layer_norm_backward(a.x_mid.data(), lp.ln2_g.data(), a.ln2_mean.data(), a.ln2_rstd.data(),
                      ws.dtmp.data(), ws.dtmp2.data(), gp.ln2_g.data(), gp.ln2_b.data(), T, d);
  for (size_t i = 0; i < static_cast<size_t>(T) * d; ++i) ws.dres[i] += ws.dtmp2[i];

  // attention branch; d(attn_out) = dres
  for (int t = 0; t < T; ++t) {
    const S* dr = ws.dres.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) gp.bo[static_cast<size_t>(i)] += dr[i];
  }
  matmul_at(a.ctx.data(), ws.dres.data(), gp.wo.data(), d, T, d, true);
  matmul_bt(ws.dres.data(), lp.wo.data(), ws.dctx.data(), T, d, d);

  std::fill(ws.dq.begin(), ws.dq.begin() + static_cast<size_t>(T) * d, S(0));
  std::fill(ws.dk.begin(), ws.dk.begin() + static_cast<size_t>(T) * d, S(0));
  std::fill(ws.dv.begin(), ws.dv.begin() + static_cast<size_t>(T) * d, S(0));
  const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<S> dprow(static_cast<size_t>(T));
  for (int h = 0; h < H; ++h) {
    const size_t off = static_cast<size_t>(h) * dh;
    const S* probs = a.probs.data() + static_cast<size_t>(h) * T * T;
    for (int i = 0; i < T; ++i) {
      const S* prow = probs + static_cast<size_t>(i) * T;
      const S* dci = ws.dctx.data() + static_cast<size_t>(i) * d + off;
      // dv_j += p_ij * dctx_i ; dp_j = dctx_i . v_j
      S dot_pp = S(0);
      for (int j = 0; j <= i; ++j) {
        const S* vj = a.v.data() + static_cast<size_t>(j) * d + off;
        S* dvj = ws.dv.data() + static_cast<size_t>(j) * d + off;
        S dp = S(0);
        const S p = prow[j];
        for (int c = 0; c < dh; ++c) {
          dvj[c] += p * dci[c];
          dp += dci[c] * vj[c];
        }
        dprow[static_cast<size_t>(j)] = dp;
        dot_pp += dp * p;
      }
      S* dqi = ws.dq.data() + static_cast<size_t>(i) * d + off;
      const S* qi = a.q.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j <= i; ++j) {
        const S dscore = prow[j] * (dprow[static_cast<size_t>(j)] - dot_pp) * inv_sqrt;
        const S* kj = a.k.data() + static_cast<size_t>(j) * d + off;
        S* dkj = ws.dk.data() + static_cast<size_t>(j) * d + off;
        for (int c = 0; c < dh; ++c) {
          dqi[c] += dscore * kj[c];
          dkj[c] += dscore * qi[c];
        }
      }
    }
  }
  if (cfg.positional == PositionalScheme::Rotary) {
    apply_rotary(ws.dq.data(), ws.rot_cos.data(), ws.rot_sin.data(), T, H, dh, true);
    apply_rotary(ws.dk.data(), ws.rot_cos.data(), ws.rot_sin.data(), T, H, dh, true);
  }
  for (int t = 0; t < T; ++t) {
    const S* dqr = ws.dq.data() + static_cast<size_t>(t) * d;
    const S* dkr = ws.dk.data() + static_cast<size_t>(t) * d;
    const S* dvr = ws.dv.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) {
      gp.bq[static_cast<size_t>(i)] += dqr[i];
      gp.bk[static_cast<size_t>(i)] += dkr[i];
      gp.bv[static_cast<size_t>(i)] += dvr[i];
    }
  }
  matmul_at(a.ln1_out.data(), ws.dq.data(), gp.wq.data(), d, T, d, true);
  matmul_at(a.ln1_out.data(), ws.dk.data(), gp.wk.data(), d, T, d, true);
  matmul_at(a.ln1_out.data(), ws.dv.data(), gp.wv.data(), d, T, d, true);
  matmul_bt(ws.dq.data(), lp.wq.data(), ws.dtmp.data(), T, d, d);
  matmul_bt(ws.dk.data(), lp.wk.data(), ws.dtmp.data(), T, d, d, true);
  matmul_bt(ws.dv.data(), lp.wv.data(), ws.dtmp.data(), T, d, d, true);
  layer_norm_backward(x_in, lp.ln1_g.data(), a.ln1_mean.data(), a.ln1_rstd.data(), ws.dtmp.data(),
                      ws.dtmp2.data(), gp.ln1_g.data(), gp.ln1_b.data(), T, d);
  for (size_t i = 0; i < static_cast<size_t>(T) * d; ++i) ws.dres[i] += ws.dtmp2[i];
}

// dlogits (T x V) and optional daux (T x C) -> parameter grads.
template <typename S>
void backward_seq(const ModelConfig& cfg, const ParamsT<S>& params, const int* tokens, int T,
                  SeqWorkspace<S>& ws, ParamsT<S>& grads, bool has_aux_grad) {
  const int d = cfg.d_model, V = cfg.vocab_size;
  const size_t Td = static_cast<size_t>(ws.T) * d;

  // unembed path into d(lnf_out) = dtmp
  if (cfg.tied_embeddings) {
    matmul(ws.dlogits.data(), params.embed.data(), ws.dtmp.data(), T, V, d);
    matmul_at(ws.dlogits.data(), ws.lnf_out.data(), grads.embed.data(), V, T, d, true);
  } else {
    matmul_bt(ws.dlogits.data(), params.unembed.data(), ws.dtmp.data(), T, V, d);
    matmul_at(ws.lnf_out.data(), ws.dlogits.data(), grads.unembed.data(), d, T, V, true);
    for (int t = 0; t < T; ++t) {
      const S* dl = ws.dlogits.data() + static_cast<size_t>(t) * V;
      for (int i = 0; i < V; ++i) grads.unembed_b[static_cast<size_t>(i)] += dl[i];
    }
  }
  const S* resid_L = ws.resid.data() + static_cast<size_t>(cfg.n_layers) * Td;
  layer_norm_backward(resid_L, params.lnf_g.data(), ws.lnf_mean.data(), ws.lnf_rstd.data(),
                      ws.dtmp.data(), ws.dres.data(), grads.lnf_g.data(), grads.lnf_b.data(), T, d);

  auto add_aux_grad = [&](int boundary) {
    if (!cfg.aux || !has_aux_grad || cfg.aux->layer != boundary) return;
    const int C = cfg.aux->n_classes;
    const S* resid_aux = ws.resid.data() + static_cast<size_t>(boundary) * Td;
    matmul_at(resid_aux, ws.daux.data(), grads.aux_w.data(), d, T, C, true);
    for (int t = 0; t < T; ++t) {
      const S* da = ws.daux.data() + static_cast<size_t>(t) * C;
      for (int i = 0; i < C; ++i) grads.aux_b[static_cast<size_t>(i)] += da[i];
    }
    matmul_bt(ws.daux.data(), params.aux_w.data(), ws.dtmp2.data(), T, C, d);
    for (size_t i = 0; i < static_cast<size_t>(T) * d; ++i) ws.dres[i] += ws.dtmp2[i];
  };
  add_aux_grad(cfg.n_layers);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const S* x_in = ws.resid.data() + static_cast<size_t>(l) * Td;
    block_backward(cfg, params.layers[static_cast<size_t>(l)], grads.layers[static_cast<size_t>(l)],
                   ws.acts[static_cast<size_t>(l)], x_in, ws, T);
    add_aux_grad(l);
  }

  for (int t = 0; t < T; ++t) {
    const S* dr = ws.dres.data() + static_cast<size_t>(t) * d;
    S* ge = grads.embed.data() + static_cast<size_t>(tokens[t]) * d;
    for (int i = 0; i < d; ++i) ge[i] += dr[i];
    if (cfg.positional == PositionalScheme::Learned) {
      S* gpz = grads.pos_embed.data() + static_cast<size_t>(t) * d;
      for (int i = 0; i < d; ++i) gpz[i] += dr[i];
    }
  }
}

// Fills dlogits for the targeted positions and returns the summed NLL.
template <typename S>
double nll_into_dlogits(const S* logits, int T, int V, const int* targets, double scale,
                        S* dlogits, bool want_grad) {
  double total = 0.0;
  if (want_grad) std::fill(dlogits, dlogits + static_cast<size_t>(T) * V, S(0));
  std::vector<double> p(static_cast<size_t>(V));
  for (int t = 0; t < T; ++t) {
    const int y = targets[t];
    if (y < 0) continue;
    const S* row = logits + static_cast<size_t>(t) * V;
    double maxv = -1e300;
    for (int i = 0; i < V; ++i) maxv = std::max(maxv, static_cast<double>(row[i]));
    double denom = 0.0;
    for (int i = 0; i < V; ++i) {
      p[static_cast<size_t>(i)] = std::exp(static_cast<double>(row[i]) - maxv);
      denom += p[static_cast<size_t>(i)];
    }
    total += -(static_cast<double>(row[y]) - maxv - std::log(denom));
    if (want_grad) {
      S* drow = dlogits + static_cast<size_t>(t) * V;
      for (int i = 0; i < V; ++i)
        drow[i] = static_cast<S>(scale * (p[static_cast<size_t>(i)] / denom - (i == y ? 1.0 : 0.0)));
    }
  }
  return total;
}

}  // namespace

// ---- public single-sequence API ---------------------------------------------

namespace {
thread_local SeqWorkspace<float> g_analysis_ws;
}

std::vector<float> forward(const ModelConfig& cfg, const Params& params,
                           std::span<const int> tokens, CaptureMode capture, ForwardTrace* trace,
                           const PatchSpec* patch) {
  cfg.validate();
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw std::invalid_argument("forward: empty token sequence");
  if (patch) {
    for (const PatchEdit& e : patch->edits)
      if (e.layer < 0 || e.layer > cfg.n_layers)
        throw std::invalid_argument("PatchEdit: layer boundary out of range");
  }
  SeqWorkspace<float>& ws = g_analysis_ws;
  forward_seq(cfg, params, tokens.data(), T, ws, patch);

  std::vector<float> logits(static_cast<size_t>(T) * cfg.vocab_size);
  for (int t = 0; t < T; ++t)
    std::memcpy(logits.data() + static_cast<size_t>(t) * cfg.vocab_size,
                ws.logits.data() + static_cast<size_t>(t) * cfg.vocab_size,
                sizeof(float) * cfg.vocab_size);

  if (capture != CaptureMode::None && trace) {
    trace->T = T;
    trace->L = cfg.n_layers;
    trace->H = cfg.n_heads;
    trace->d = cfg.d_model;
    trace->resid.resize(static_cast<size_t>(cfg.n_layers + 1) * T * cfg.d_model);
    const size_t Td = static_cast<size_t>(ws.T) * cfg.d_model;
    for (int l = 0; l <= cfg.n_layers; ++l)
      for (int t = 0; t < T; ++t)
        std::memcpy(trace->resid.data() + (static_cast<size_t>(l) * T + t) * cfg.d_model,
                    ws.resid.data() + static_cast<size_t>(l) * Td + static_cast<size_t>(t) * cfg.d_model,
                    sizeof(float) * cfg.d_model);
    if (capture == CaptureMode::ResidAttn) {
      trace->attn.assign(static_cast<size_t>(cfg.n_layers) * cfg.n_heads * T * T, 0.0f);
      for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h)
          for (int i = 0; i < T; ++i)
            std::memcpy(trace->attn.data() +
                            ((static_cast<size_t>(l) * cfg.n_heads + h) * T + i) * T,
                        ws.acts[static_cast<size_t>(l)].probs.data() +
                            (static_cast<size_t>(h) * T + i) * T,
                        sizeof(float) * T);
    } else {
      trace->attn.clear();
    }
  }
  return logits;
}

std::vector<float> forward_from_boundary(const ModelConfig& cfg, const Params& params,
                                         std::vector<float> resid, int layer, int T) {
  cfg.validate();
  if (layer < 0 || layer > cfg.n_layers) throw std::invalid_argument("forward_from_boundary: bad layer");
  if (static_cast<int>(resid.size()) != T * cfg.d_model)
    throw std::invalid_argument("forward_from_boundary: resid size mismatch");
  SeqWorkspace<float>& ws = g_analysis_ws;
  ws.ensure(cfg, T);
  const int d = cfg.d_model, V = cfg.vocab_size;
  const size_t Td = static_cast<size_t>(ws.T) * d;
  for (int t = 0; t < T; ++t)
    std::memcpy(ws.resid.data() + static_cast<size_t>(layer) * Td + static_cast<size_t>(t) * d,
                resid.data() + static_cast<size_t>(t) * d, sizeof(float) * d);
  for (int l = layer; l < cfg.n_layers; ++l) {
    float* x_in = ws.resid.data() + static_cast<size_t>(l) * Td;
    float* x_out = ws.resid.data() + static_cast<size_t>(l + 1) * Td;
    block_forward(cfg, params.layers[static_cast<size_t>(l)], ws.acts[static_cast<size_t>(l)],
                  x_in, x_out, T, ws.rot_cos.data(), ws.rot_sin.data());
  }
  // final-position logits only
  const float* last = ws.resid.data() + static_cast<size_t>(cfg.n_layers) * Td +
                      static_cast<size_t>(T - 1) * d;
  std::vector<float> ln_row(static_cast<size_t>(d));
  float mean, rstd;
  layer_norm(last, params.lnf_g.data(), params.lnf_b.data(), ln_row.data(), &mean, &rstd, 1, d,
             cfg.ln_eps);
  std::vector<float> out(static_cast<size_t>(V));
  if (cfg.tied_embeddings) {
    matmul_bt(ln_row.data(), params.embed.data(), out.data(), 1, d, V);
  } else {
    matmul(ln_row.data(), params.unembed.data(), out.data(), 1, d, V);
    for (int i = 0; i < V; ++i) out[static_cast<size_t>(i)] += params.unembed_b[static_cast<size_t>(i)];
  }
  return out;
}

LossResult sequence_nll(std::span<const float> logits, int T, int vocab,
                        std::span<const int> targets, LossNormalization norm) {
  if (static_cast<int>(logits.size()) != T * vocab || static_cast<int>(targets.size()) != T)
    throw std::invalid_argument("sequence_nll: shape mismatch");
  int count = 0;
  for (int t = 0; t < T; ++t)
    if (targets[t] >= 0) ++count;
  if (count == 0) throw std::invalid_argument("sequence_nll: no targeted positions");
  double total = nll_into_dlogits<float>(logits.data(), T, vocab, targets.data(), 0.0,
                                         nullptr, false);
  return {norm == LossNormalization::Mean ? total / count : total, count};
}

// ---- batched gradient API -----------------------------------------------------

template <typename S>
GradContext<S>::GradContext(const ModelConfig& c)
    : cfg(c), grads(zero_grads_like<S>(c)), ws(new SeqWorkspace<S>()) {}

template <typename S>
GradContext<S>::~GradContext() {
  delete ws;
}

template <typename S>
GradContext<S>::GradContext(GradContext&& o) noexcept
    : cfg(o.cfg), grads(std::move(o.grads)), ws(o.ws) {
  o.ws = nullptr;
}

template <typename S>
std::pair<double, double> grad_batch_slice(const ModelConfig& cfg, const ParamsT<S>& params,
                                           const PreparedBatch& batch, int b0, int b1,
                                           double scale, double aux_scale, GradContext<S>& ctx) {
  double main_sum = 0.0, aux_sum = 0.0;
  const bool use_aux = cfg.aux.has_value() && !batch.aux_labels.empty();
  for (int b = b0; b < b1; ++b) {
    const int* tokens = batch.tokens.data() + static_cast<size_t>(b) * batch.T;
    const int* targets = batch.targets.data() + static_cast<size_t>(b) * batch.T;
    forward_seq(cfg, params, tokens, batch.T, *ctx.ws);
    main_sum += nll_into_dlogits(ctx.ws->logits.data(), batch.T, cfg.vocab_size, targets, scale,
                                 ctx.ws->dlogits.data(), true);
    bool aux_here = false;
    if (use_aux) {
      const int* aux_labels = batch.aux_labels.data() + static_cast<size_t>(b) * batch.T;
      aux_sum += nll_into_dlogits(ctx.ws->aux_logits.data(), batch.T, cfg.aux->n_classes,
                                  aux_labels, aux_scale, ctx.ws->daux.data(), true);
      aux_here = true;
    }
    backward_seq(cfg, params, tokens, batch.T, *ctx.ws, ctx.grads, aux_here);
  }
  return {main_sum, aux_sum};
}

template <typename S>
std::pair<double, double> loss_batch_slice(const ModelConfig& cfg, const ParamsT<S>& params,
                                           const PreparedBatch& batch, int b0, int b1,
                                           GradContext<S>& ctx) {
  double main_sum = 0.0, aux_sum = 0.0;
  const bool use_aux = cfg.aux.has_value() && !batch.aux_labels.empty();
  for (int b = b0; b < b1; ++b) {
    const int* tokens = batch.tokens.data() + static_cast<size_t>(b) * batch.T;
    const int* targets = batch.targets.data() + static_cast<size_t>(b) * batch.T;
    forward_seq(cfg, params, tokens, batch.T, *ctx.ws);
    main_sum += nll_into_dlogits<S>(ctx.ws->logits.data(), batch.T, cfg.vocab_size, targets, 0.0,
                                 nullptr, false);
    if (use_aux) {
      const int* aux_labels = batch.aux_labels.data() + static_cast<size_t>(b) * batch.T;
      aux_sum += nll_into_dlogits<S>(ctx.ws->aux_logits.data(), batch.T, cfg.aux->n_classes,
                                  aux_labels, 0.0, nullptr, false);
    }
  }
  return {main_sum, aux_sum};
}

// explicit instantiations
template ParamsT<float> init_model_t<float>(const ModelConfig&);
template ParamsT<double> init_model_t<double>(const ModelConfig&);
template ParamsT<float> zero_grads_like<float>(const ModelConfig&);
template ParamsT<double> zero_grads_like<double>(const ModelConfig&);
template bool all_finite<float>(const ParamsT<float>&);
template bool all_finite<double>(const ParamsT<double>&);
template struct GradContext<float>;
template struct GradContext<double>;
template std::pair<double, double> grad_batch_slice<float>(const ModelConfig&, const ParamsT<float>&,
                                                           const PreparedBatch&, int, int, double,
                                                           double, GradContext<float>&);
template std::pair<double, double> grad_batch_slice<double>(const ModelConfig&,
                                                            const ParamsT<double>&,
                                                            const PreparedBatch&, int, int, double,
                                                            double, GradContext<double>&);
template std::pair<double, double> loss_batch_slice<float>(const ModelConfig&, const ParamsT<float>&,
                                                           const PreparedBatch&, int, int,
                                                           GradContext<float>&);
template std::pair<double, double> loss_batch_slice<double>(const ModelConfig&,
                                                            const ParamsT<double>&,
                                                            const PreparedBatch&, int, int,
                                                            GradContext<double>&);

}  // namespace stw
