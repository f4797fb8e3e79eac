#pragma once

#include <optional>

#include "losses.hpp"

namespace sao::train {

enum class Precision { F32, F64 };

struct LrSchedule {
  int warmup_steps = 100;
  double max_lr = 1e-4;
  double decay_per_epoch = 0.99;
};

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double ema_lambda = 0.99;
  losses::LossWeights weights;
  LrSchedule lr;
  uint64_t seed = 0;
  Precision precision = Precision::F32;
  double mask_ratio = 0.15;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  enc::EncoderConfig encoder;
  heads::HeadConfig heads;

  void validate() const;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

struct ModelState {
  ad::ParameterStore online;  // encoder + projector + predictor + denoise + mlm + downstream
  ad::ParameterStore target;  // encoder + projector only, never differentiated
  AdamState adam;
  int64_t step = 0;
  int epoch = 0;
};

/// Online randomly initialized from the seed; target is a bit-identical copy
/// of the online encoder and projector.
ModelState init_model(const TrainConfig& cfg);

/// phi <- lambda * phi + (1 - lambda) * theta for every target tensor.
void ema_update(ModelState& state, double lambda, Precision precision);

/// max_lr * min(step / warmup_steps, 1) * decay^epoch; zero at step 0.
double lr_at(const LrSchedule& lr, int64_t step, int epoch);

/// One Adam step on the online parameters at the state's current step/epoch,
/// then advances the step counter.
void optimizer_step(ModelState& state, const ad::GradientMap& grads,
                    const TrainConfig& cfg);

/// Bootstrap pretraining over structure pairs. Appends one JSON object per
/// optimizer step to metrics_path when non-empty.
ModelState pretrain(const std::vector<synth::LabeledPair>& train,
                    const TrainConfig& cfg, const std::string& metrics_path);

enum class FinetuneMode { Vanilla, Tonp, Mixed, Sao };

FinetuneMode finetune_mode_from_string(const std::string& s);
std::string finetune_mode_to_string(FinetuneMode m);

/// Supervised multi-label fine-tuning. Mode selects the training structures;
/// Sao additionally requires a pretrained model whose encoder seeds the
/// online encoder.
ModelState finetune(const std::vector<synth::LabeledPair>& train,
                    FinetuneMode mode, const ModelState* pretrained,
                    const TrainConfig& cfg, const std::string& metrics_path);

/// Parses a config from JSON text; absent keys keep their defaults.
TrainConfig train_config_from_json_text(const std::string& text);
std::string train_config_to_json_text(const TrainConfig& cfg);

struct LoadedCheckpoint {
  ModelState state;
  TrainConfig config;
};

/// JSON header line (format, config, step, epoch, tensor manifest) followed by
/// little-endian float32 payload covering parameters and optimizer moments.
void save_checkpoint(const ModelState& state, const TrainConfig& cfg,
                     const std::string& path);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace sao::train
