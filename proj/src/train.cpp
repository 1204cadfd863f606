#include "stw/train.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace stw {

using nlohmann::json;

void adamw_update_tensor(std::span<float> p, std::span<const float> g, std::span<float> m,
                         std::span<float> v, long long step, const AdamWConfig& opt,
                         double lr, bool decays) {
  const double b1 = opt.beta1, b2 = opt.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (size_t i = 0; i < p.size(); ++i) {
    double gi = g[i];
    double mi = b1 * m[i] + (1.0 - b1) * gi;
    double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
    m[i] = static_cast<float>(mi);
    v[i] = static_cast<float>(vi);
    double mhat = mi / bc1;
    double vhat = vi / bc2;
    double update = mhat / (std::sqrt(vhat) + opt.eps);
    if (decays) update += opt.weight_decay * p[i];
    p[i] = static_cast<float>(p[i] - lr * update);
  }
}

void adamw_step(const ModelConfig& cfg, Params& params, Params& grads, AdamWState& st,
                const AdamWConfig& opt, double lr) {
  size_t total = 0;
  for_each_tensor(params, [&](const std::string&, std::vector<float>& v, bool) { total += v.size(); });
  if (st.m.empty()) {
    st.m.assign(total, 0.0f);
    st.v.assign(total, 0.0f);
  } else if (st.m.size() != total) {
    throw std::invalid_argument("adamw_step: optimizer state size mismatch");
  }
  ++st.step;

  size_t off = 0;
  auto git = [&grads]() {
    std::vector<std::vector<float>*> out;
    for_each_tensor(grads, [&](const std::string&, std::vector<float>& v, bool) { out.push_back(&v); });
    return out;
  }();
  size_t ti = 0;
  for_each_tensor(params, [&](const std::string&, std::vector<float>& pv, bool decays) {
    std::vector<float>& gv = *git[ti++];
    if (gv.size() != pv.size()) throw std::invalid_argument("adamw_step: gradient shape mismatch");
    adamw_update_tensor(pv, gv, std::span<float>(st.m).subspan(off, pv.size()),
                        std::span<float>(st.v).subspan(off, pv.size()), st.step, opt, lr, decays);
    off += pv.size();
  });
  (void)cfg;
  if (!all_finite(params)) throw std::runtime_error("adamw_step: non-finite parameter after update");
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive");
  if (opt.lr <= 0 || opt.beta1 <= 0 || opt.beta1 >= 1 || opt.beta2 <= 0 || opt.beta2 >= 1 ||
      opt.eps <= 0 || opt.weight_decay < 0 || opt.grad_clip < 0 || opt.warmup_steps < 0)
    throw std::invalid_argument("TrainConfig: hyperparameters must be positive");
  if (n_threads < 0 || log_every < 1 || eval_every < 0)
    throw std::invalid_argument("TrainConfig: bad logging/threading fields");
}

PreparedBatch prepare_batch(const Corpus& corpus, std::span<const int> doc_indices,
                            const std::optional<AuxHeadConfig>& aux) {
  PreparedBatch b;
  b.B = static_cast<int>(doc_indices.size());
  b.T = 0;
  for (int di : doc_indices) b.T = std::max(b.T, corpus.docs[static_cast<size_t>(di)].length());
  b.tokens.assign(static_cast<size_t>(b.B) * b.T, 0);
  b.targets.assign(static_cast<size_t>(b.B) * b.T, -1);

  std::vector<int> token_parity;  // -1 for non-action tokens
  int n_actions = 0;
  if (aux) {
    for (const auto& tok : corpus.vocab.tokens) {
      bool is_perm = tok.size() == static_cast<size_t>(corpus.group_degree);
      if (is_perm) {
        token_parity.push_back(Perm::from_string(tok).parity());
        ++n_actions;
      } else {
        token_parity.push_back(-1);
      }
    }
    b.aux_labels.assign(static_cast<size_t>(b.B) * b.T, -1);
  }

  for (int i = 0; i < b.B; ++i) {
    const Document& d = corpus.docs[static_cast<size_t>(doc_indices[static_cast<size_t>(i)])];
    int running_parity = 0;
    for (int t = 0; t < d.length(); ++t) {
      const int tok = d.input_ids[static_cast<size_t>(t)];
      b.tokens[static_cast<size_t>(i) * b.T + t] = tok;
      b.targets[static_cast<size_t>(i) * b.T + t] = d.target_ids[static_cast<size_t>(t)];
      if (aux) {
        int tp = token_parity[static_cast<size_t>(tok)];
        if (tp < 0)
          throw std::invalid_argument("prepare_batch: aux labels need action-token inputs");
        running_parity ^= tp;
        int label = aux->target == AuxTarget::Parity ? running_parity
                                                     : running_parity * n_actions + tok;
        b.aux_labels[static_cast<size_t>(i) * b.T + t] = label;
      }
    }
  }
  return b;
}

namespace {

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min<unsigned>(hw == 0 ? 1 : hw, 8));
}

void reduce_grads(std::vector<GradContext<float>>& ctxs) {
  std::vector<std::vector<float>*> master;
  for_each_tensor(ctxs[0].grads,
                  [&](const std::string&, std::vector<float>& v, bool) { master.push_back(&v); });
  for (size_t c = 1; c < ctxs.size(); ++c) {
    size_t ti = 0;
    for_each_tensor(ctxs[c].grads, [&](const std::string&, std::vector<float>& v, bool) {
      std::vector<float>& dst = *master[ti++];
      for (size_t i = 0; i < v.size(); ++i) dst[i] += v[i];
    });
  }
}

void zero_grads(GradContext<float>& ctx) {
  for_each_tensor(ctx.grads, [](const std::string&, std::vector<float>& v, bool) {
    std::fill(v.begin(), v.end(), 0.0f);
  });
}

double clip_grads(Params& grads, double max_norm) {
  double sq = 0.0;
  for_each_tensor(grads, [&](const std::string&, std::vector<float>& v, bool) {
    for (float x : v) sq += static_cast<double>(x) * x;
  });
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for_each_tensor(grads, [&](const std::string&, std::vector<float>& v, bool) {
      for (float& x : v) x *= scale;
    });
  }
  return norm;
}

}  // namespace

TrainingLog train(TrainState& state, const Corpus& corpus, const ModelConfig& cfg,
                  const TrainConfig& tc, const TrainCallbacks& cb) {
  cfg.validate();
  tc.validate();
  if (corpus.size() == 0) throw std::invalid_argument("train: empty corpus");
  if (corpus.vocab.size() != cfg.vocab_size)
    throw std::invalid_argument("train: corpus vocabulary size != model vocab_size");

  const int n_threads = resolve_threads(tc.n_threads);
  std::vector<GradContext<float>> ctxs;
  ctxs.reserve(static_cast<size_t>(n_threads));
  for (int i = 0; i < n_threads; ++i) ctxs.emplace_back(cfg);

  TrainingLog log;
  log.loss_norm = tc.loss_norm;

  const int N = corpus.size();
  const int batches_per_epoch = (N + tc.batch_size - 1) / tc.batch_size;

  for (int epoch = state.epoch; epoch < tc.epochs; ++epoch) {
    if (tc.max_steps > 0 && state.step >= tc.max_steps) break;
    std::vector<int> order(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) order[static_cast<size_t>(i)] = i;
    Rng epoch_rng = Rng::derive(tc.data_seed, /*stream=*/0xda7a, static_cast<uint64_t>(epoch));
    epoch_rng.shuffle(order);

    const int first_batch = (epoch == state.epoch) ? state.batch_in_epoch : 0;
    for (int bi = first_batch; bi < batches_per_epoch; ++bi) {
      if (tc.max_steps > 0 && state.step >= tc.max_steps) return log;
      const int lo = bi * tc.batch_size;
      const int hi = std::min(N, lo + tc.batch_size);
      std::span<const int> idx(order.data() + lo, static_cast<size_t>(hi - lo));
      PreparedBatch batch = prepare_batch(corpus, idx, cfg.aux);

      int n_targets = 0, n_aux = 0;
      for (int t : batch.targets) n_targets += t >= 0 ? 1 : 0;
      for (int t : batch.aux_labels) n_aux += t >= 0 ? 1 : 0;
      if (n_targets == 0) throw std::invalid_argument("train: batch with no targeted positions");
      const double scale = tc.loss_norm == LossNormalization::Mean ? 1.0 / n_targets : 1.0;
      const double aux_w = cfg.aux ? cfg.aux->weight : 0.0;
      const double aux_scale = n_aux > 0 ? aux_w / n_aux : 0.0;

      std::vector<std::pair<double, double>> sums(static_cast<size_t>(n_threads), {0.0, 0.0});
      {
        std::vector<std::thread> threads;
        for (int s = 0; s < n_threads; ++s) {
          const int b0 = batch.B * s / n_threads;
          const int b1 = batch.B * (s + 1) / n_threads;
          zero_grads(ctxs[static_cast<size_t>(s)]);
          if (b0 >= b1) continue;
          threads.emplace_back([&, s, b0, b1]() {
            sums[static_cast<size_t>(s)] = grad_batch_slice(
                cfg, state.params, batch, b0, b1, scale, aux_scale, ctxs[static_cast<size_t>(s)]);
          });
        }
        for (auto& th : threads) th.join();
      }
      reduce_grads(ctxs);

      double main_sum = 0.0, aux_sum = 0.0;
      for (auto& [a, b] : sums) {
        main_sum += a;
        aux_sum += b;
      }
      double loss = tc.loss_norm == LossNormalization::Mean ? main_sum / n_targets : main_sum;
      if (n_aux > 0) loss += aux_w * aux_sum / n_aux;
      if (!std::isfinite(loss)) {
        log.diverged = true;
        return log;
      }

      clip_grads(ctxs[0].grads, tc.opt.grad_clip);
      double lr = tc.opt.lr;
      if (tc.opt.warmup_steps > 0 && state.step < tc.opt.warmup_steps)
        lr *= static_cast<double>(state.step + 1) / tc.opt.warmup_steps;
      adamw_step(cfg, state.params, ctxs[0].grads, state.opt, tc.opt, lr);

      ++state.step;
      state.batch_in_epoch = bi + 1;

      const bool log_now = state.step % tc.log_every == 0 || (bi + 1 == batches_per_epoch);
      const bool eval_now = tc.eval_every > 0 && cb.on_eval && state.step % tc.eval_every == 0;
      if (log_now || eval_now) {
        TrainLogRecord rec;
        rec.step = state.step;
        rec.epoch = epoch;
        rec.loss = loss;
        rec.lr = lr;
        if (eval_now) {
          cb.on_eval(state, rec);
          rec.has_eval = true;
        }
        log.records.push_back(rec);
        if (cb.on_log) cb.on_log(rec);
      }
    }
    state.epoch = epoch + 1;
    state.batch_in_epoch = 0;
  }
  return log;
}

// ---- serialization -----------------------------------------------------------

namespace {

json aux_to_json(const std::optional<AuxHeadConfig>& aux) {
  if (!aux) return nullptr;
  return json{{"layer", aux->layer},
              {"target", aux->target == AuxTarget::Parity ? "parity" : "parity-action"},
              {"n_classes", aux->n_classes},
              {"weight", aux->weight}};
}

std::optional<AuxHeadConfig> aux_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  AuxHeadConfig a;
  a.layer = j.at("layer").get<int>();
  a.target = j.at("target").get<std::string>() == "parity" ? AuxTarget::Parity
                                                           : AuxTarget::ParityAction;
  a.n_classes = j.at("n_classes").get<int>();
  a.weight = j.at("weight").get<double>();
  return a;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  json j{{"n_layers", cfg.n_layers},
         {"d_model", cfg.d_model},
         {"n_heads", cfg.n_heads},
         {"d_mlp", cfg.d_mlp},
         {"vocab_size", cfg.vocab_size},
         {"max_positions", cfg.max_positions},
         {"positional", to_string(cfg.positional)},
         {"tied_embeddings", cfg.tied_embeddings},
         {"ln_eps", cfg.ln_eps},
         {"init_seed", cfg.init_seed},
         {"aux", aux_to_json(cfg.aux)}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_mlp = j.at("d_mlp").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_positions = j.at("max_positions").get<int>();
  cfg.positional = positional_from_string(j.at("positional").get<std::string>());
  cfg.tied_embeddings = j.at("tied_embeddings").get<bool>();
  cfg.ln_eps = j.at("ln_eps").get<double>();
  cfg.init_seed = j.at("init_seed").get<uint64_t>();
  cfg.aux = aux_from_json(j.at("aux"));
  return cfg;
}

void save_training_log(const TrainingLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_training_log: cannot open " + path);
  out << json{{"meta", true},
              {"loss_norm", log.loss_norm == LossNormalization::Mean ? "mean" : "sum"},
              {"diverged", log.diverged}}
             .dump()
      << '\n';
  for (const auto& r : log.records) {
    json j{{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}};
    if (r.has_eval) {
      j["state_cutoff"] = r.state_cutoff;
      j["parity_cutoff"] = r.parity_cutoff;
      j["state_acc_train_len"] = r.state_acc_train_len;
    }
    out << j.dump() << '\n';
  }
}

TrainingLog load_training_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_training_log: cannot open " + path);
  TrainingLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.contains("meta")) {
      log.loss_norm = j.at("loss_norm").get<std::string>() == "sum" ? LossNormalization::Sum
                                                                    : LossNormalization::Mean;
      log.diverged = j.at("diverged").get<bool>();
      continue;
    }
    TrainLogRecord r;
    r.step = j.at("step").get<long long>();
    r.epoch = j.at("epoch").get<int>();
    r.loss = j.at("loss").get<double>();
    r.lr = j.at("lr").get<double>();
    if (j.contains("state_cutoff")) {
      r.has_eval = true;
      r.state_cutoff = j.at("state_cutoff").get<int>();
      r.parity_cutoff = j.at("parity_cutoff").get<int>();
      r.state_acc_train_len = j.at("state_acc_train_len").get<double>();
    }
    log.records.push_back(r);
  }
  return log;
}

namespace {

constexpr char kMagic[8] = {'S', 'T', 'W', 'C', 'K', 'P', 'T', '1'};

void write_tensor(std::ofstream& out, const std::string& name, const std::vector<float>& v) {
  uint32_t name_len = static_cast<uint32_t>(name.size());
  uint64_t n = v.size();
  out.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
  out.write(name.data(), name_len);
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const TrainState& state,
                     bool with_optimizer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  json header{{"schema_version", 1},
              {"model", json::parse(model_config_to_json(cfg))},
              {"has_optimizer", with_optimizer},
              {"step", state.step},
              {"epoch", state.epoch},
              {"batch_in_epoch", state.batch_in_epoch},
              {"adam_step", state.opt.step}};
  std::string htext = header.dump();
  out.write(kMagic, sizeof(kMagic));
  uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(hlen));

  for_each_tensor(const_cast<Params&>(state.params),
                  [&](const std::string& name, std::vector<float>& v, bool) {
                    write_tensor(out, name, v);
                  });
  if (with_optimizer) {
    write_tensor(out, "opt.m", state.opt.m);
    write_tensor(out, "opt.v", state.opt.v);
  }
  uint32_t sentinel = 0;
  out.write(reinterpret_cast<const char*>(&sentinel), sizeof(sentinel));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1u << 20)) throw std::runtime_error("load_checkpoint: corrupt header");
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  json header = json::parse(htext);
  if (header.at("schema_version").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported schema version");

  Checkpoint ck;
  ck.cfg = model_config_from_json(header.at("model").dump());
  ck.has_optimizer = header.at("has_optimizer").get<bool>();
  ck.state.step = header.at("step").get<long long>();
  ck.state.epoch = header.at("epoch").get<int>();
  ck.state.batch_in_epoch = header.at("batch_in_epoch").get<int>();
  ck.state.opt.step = header.at("adam_step").get<long long>();
  ck.state.params = zero_grads_like<float>(ck.cfg);

  std::map<std::string, std::vector<float>*> slots;
  for_each_tensor(ck.state.params, [&](const std::string& name, std::vector<float>& v, bool) {
    slots[name] = &v;
  });
  slots["opt.m"] = &ck.state.opt.m;
  slots["opt.v"] = &ck.state.opt.v;

  for (;;) {
    uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
    if (name_len == 0) break;
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    auto it = slots.find(name);
    if (it == slots.end()) throw std::runtime_error("load_checkpoint: unknown tensor " + name);
    std::vector<float>& dst = *it->second;
    if (name.rfind("opt.", 0) == 0) {
      dst.resize(n);
    } else if (dst.size() != n) {
      throw std::runtime_error("load_checkpoint: tensor size mismatch for " + name);
    }
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated tensor " + name);
  }
  return ck;
}

Checkpoint load_checkpoint_expect(const std::string& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.cfg == expected))
    throw std::runtime_error("load_checkpoint: stored config does not match the expected config");
  return ck;
}

uint64_t params_fingerprint(const Params& params) {
  uint64_t h = 1469598103934665603ULL;
  for_each_tensor(const_cast<Params&>(params), [&](const std::string&, std::vector<float>& v, bool) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (size_t i = 0; i < v.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  });
  return h;
}

}  // namespace stw
