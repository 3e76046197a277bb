// Adam training loop with a step-milestone learning-rate schedule,
// deterministic batch order and resumable checkpoints.
//
// Every step is a pure function of (seed, step, state): batch membership and
// dropout masks are derived from MixSeed(seed, step, ...), and parameters and
// Adam moments are rounded to float32 after each update so the checkpoint
// holds the exact state.

#ifndef L2S_TRAINER_H_
#define L2S_TRAINER_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "l2s/config_file.h"
#include "l2s/featureio.h"
#include "l2s/objectives.h"
#include "l2s/s2s_model.h"

namespace l2s {

struct TrainConfig {
  int batch_size = 32;
  int max_steps = 20000;
  double base_lr = 4.4e-2;
  double anneal_rate = 0.3;
  std::vector<int> anneal_steps = {3000, 4000, 5000};
  LossWeights weights;
  uint64_t seed = 0;
  Variant variant = Variant::kFeatures;
  double lr_scale = 1.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int warmup_steps = 0;    // linear ramp over the first updates; 0 disables
  int eval_interval = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool l1_average_over_dims = false;

  void Validate() const;
  std::string Serialize() const;
  static TrainConfig FromKeyValues(const KeyValues& kv);
  // Over every field except max_steps, so a finished run can be extended.
  uint64_t Fingerprint() const;
};

// base_lr * anneal_rate^(number of milestones <= step). lr_scale is applied
// by the trainer on top of this.
double LrAt(int step, const TrainConfig& config);

// One utterance with everything any variant may need.
struct TrainExample {
  std::string utt_id;
  FeatureSequence lip;
  UnitSequence lip_units;     // units variant input
  FeatureSequence speech;     // feature targets
  UnitSequence speech_units;  // unit targets, exactly 2T long
  std::vector<int> ctc_tokens;
};

struct TrainData {
  std::vector<TrainExample> train;
  std::vector<TrainExample> val;
};

// What the optimizer uses at `step`: LrAt * lr_scale, ramped linearly over
// the first warmup_steps updates.
double EffectiveLr(int step, const TrainConfig& config);

// Trims or pads (repeating the last id) to `frames`.
UnitSequence AlignUnits(const UnitSequence& units, int frames);

// Indices into `num_examples` used at `step`. Each epoch is a seeded shuffle,
// cut into pools of 8 batches that are sorted by `lengths` before batching so
// batch members have similar lengths; batch order within the epoch is then
// shuffled again.
std::vector<size_t> BatchIndices(const std::vector<int>& lengths, int batch_size, uint64_t seed,
                                 int step);

struct TrainState {
  S2SModel model;
  ParameterSet adam_m;
  ParameterSet adam_v;
  int step = 0;  // number of completed updates
  double best_val = 0.0;
  int best_step = -1;  // -1: no validation yet
};

TrainState InitTrainState(const ModelConfig& model_config, const TrainConfig& config);

// Full state incl. Adam moments and fingerprints of both configs.
void SaveTrainState(const TrainState& state, const TrainConfig& config,
                    const std::filesystem::path& path);
// Throws kIncompatible when either config fingerprint differs.
TrainState LoadTrainState(const std::filesystem::path& path, const ModelConfig& model_config,
                          const TrainConfig& config);

struct LogRow {
  int step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
};

std::string FormatLogRow(const LogRow& row);
inline constexpr const char* kTrainLogHeader = "step\tlr\ttrain_loss\tval_loss";

struct TrainOptions {
  // Stop after this many completed steps (capped by max_steps).
  std::optional<int> stop_step;
  // When set: train.log (appended), last.l2sc and best.l2sc go here.
  std::optional<std::filesystem::path> out_dir;
  // Receives warnings and progress lines.
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  TrainState state;
  std::vector<LogRow> rows;  // only the steps run in this call
};

// Mean per-utterance loss in evaluation mode for the configured variant.
LossBreakdown EvaluateLoss(const S2SModel& model, const std::vector<TrainExample>& examples,
                           const TrainConfig& config);

TrainResult Train(TrainState state, const TrainData& data, const TrainConfig& config,
                  const TrainOptions& options = {});

// Loads `checkpoint` and continues to max_steps (or stop_step). Warns and
// returns the loaded state unchanged when it is already at max_steps.
TrainResult Resume(const std::filesystem::path& checkpoint, const TrainData& data,
                   const ModelConfig& model_config, const TrainConfig& config,
                   const TrainOptions& options = {});

}  // namespace l2s

#endif  // L2S_TRAINER_H_
