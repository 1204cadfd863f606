#pragma once

#include <functional>
#include <span>
#include <string>

#include "stw/corpus.hpp"
#include "stw/model.hpp"

namespace stw {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global L2 norm; 0 disables clipping
  int warmup_steps = 100;  // linear warmup from 0
};

struct AdamWState {
  std::vector<float> m, v;  // flat, canonical tensor order
  long long step = 0;
};

// Decoupled-weight-decay Adam update on one tensor; exposed for direct tests.
void adamw_update_tensor(std::span<float> p, std::span<const float> g, std::span<float> m,
                         std::span<float> v, long long step, const AdamWConfig& opt,
                         double lr, bool decays);

// One optimizer step over all tensors. lr is the schedule-resolved rate.
void adamw_step(const ModelConfig& cfg, Params& params, Params& grads, AdamWState& st,
                const AdamWConfig& opt, double lr);

struct TrainConfig {
  int epochs = 8;
  int batch_size = 128;
  AdamWConfig opt;
  LossNormalization loss_norm = LossNormalization::Mean;
  uint64_t data_seed = 1;
  int n_threads = 0;  // 0 = hardware concurrency capped at 8
  int log_every = 50;
  int eval_every = 0;    // steps between eval-hook invocations; 0 disables
  long long max_steps = 0;  // stop after this many global steps; 0 = unlimited

  void validate() const;
};

struct TrainLogRecord {
  long long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  bool has_eval = false;
  int state_cutoff = -1;
  int parity_cutoff = -1;
  double state_acc_train_len = -1.0;
};

struct TrainingLog {
  std::vector<TrainLogRecord> records;
  bool diverged = false;
  LossNormalization loss_norm = LossNormalization::Mean;
};

void save_training_log(const TrainingLog& log, const std::string& path);  // JSON lines
TrainingLog load_training_log(const std::string& path);

struct TrainState {
  Params params;
  AdamWState opt;
  long long step = 0;
  int epoch = 0;           // completed epochs
  int batch_in_epoch = 0;  // batches consumed inside the current epoch
};

struct TrainCallbacks {
  std::function<void(const TrainLogRecord&)> on_log;
  // Invoked every eval_every steps with a mutable record; fill cutoffs etc.
  std::function<void(const TrainState&, TrainLogRecord&)> on_eval;
};

PreparedBatch prepare_batch(const Corpus& corpus, std::span<const int> doc_indices,
                            const std::optional<AuxHeadConfig>& aux);

// Trains in place, resuming from (state.epoch, state.batch_in_epoch).
// Deterministic given (cfg.init_seed, tc.data_seed, tc.n_threads).
TrainingLog train(TrainState& state, const Corpus& corpus, const ModelConfig& cfg,
                  const TrainConfig& tc, const TrainCallbacks& cb = {});

// ---- checkpoints -----------------------------------------------------------
//
// Binary container: magic, JSON header (schema version, ModelConfig, counters,
// optimizer flag), then named little-endian float32 tensor blobs.
struct Checkpoint {
  ModelConfig cfg;
  TrainState state;
  bool has_optimizer = false;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const TrainState& state,
                     bool with_optimizer = true);
Checkpoint load_checkpoint(const std::string& path);
// Loads and verifies the stored config equals `expected`.
Checkpoint load_checkpoint_expect(const std::string& path, const ModelConfig& expected);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

// FNV-1a over the tensor bytes in canonical order; byte-identical parameters
// produce identical fingerprints.
uint64_t params_fingerprint(const Params& params);

}  // namespace stw
