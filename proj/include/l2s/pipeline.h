// End-to-end orchestration used by the l2s command-line tool: dataset
// checks, data loading for training, inference, evaluation and the variant
// ablation on the synthetic task.

#ifndef L2S_PIPELINE_H_
#define L2S_PIPELINE_H_

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "l2s/featureio.h"
#include "l2s/metrics.h"
#include "l2s/objectives.h"
#include "l2s/quantizer.h"
#include "l2s/s2s_model.h"
#include "l2s/trainer.h"
#include "l2s/vocoder.h"

namespace l2s {

using LogFn = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// prepare

struct PrepConfig {
  int video_fps = 25;
  int audio_sample_rate_hz = 16000;
  int roi_width = 96;
  int roi_height = 96;
  std::filesystem::path landmark_source;  // informational; extraction is upstream
  double max_invalid_fraction = 0.01;
  SplitRatios ratios;

  // kConfig unless the rates agree with 25 Hz lip / 50 Hz speech features.
  void Validate() const;
  static PrepConfig FromKeyValues(const KeyValues& kv);
};

struct PrepViolation {
  std::string utt_id;
  std::string message;
};

struct PrepReport {
  size_t num_utterances = 0;
  std::vector<PrepViolation> violations;
  bool splits_assigned = false;

  size_t num_invalid() const;
  std::string ToTsv() const;
};

// Checks every record, assigns splits when the manifest has none, and writes
// `manifest.tsv` plus `prepare_report.tsv` into `out_dir`. Throws kValidation
// (after writing the report) when too many utterances are invalid.
PrepReport PrepareDataset(const std::filesystem::path& manifest, const PrepConfig& config,
                          uint64_t seed, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// data for training

struct DataSources {
  const Codebook* lip_codebook = nullptr;     // units variant input
  const Codebook* speech_codebook = nullptr;  // units variant targets
  const CtcTokenizer* tokenizer = nullptr;    // features_ctc targets
};

// Speech units are aligned to exactly 2T frames.
TrainExample MakeExample(const std::string& utt_id, FeatureSequence lip, FeatureSequence speech,
                         const std::string& transcript, Variant variant,
                         const DataSources& sources);

TrainData LoadTrainData(const Manifest& manifest, Variant variant, const DataSources& sources);

// ---------------------------------------------------------------------------
// infer

enum class InferMode { kFeaturesThenQuantize, kUnitsDirect };

const char* InferModeName(InferMode mode);
InferMode ParseInferMode(const std::string& name);

struct InferResult {
  UnitSequence units;                       // 50 Hz, 2T frames
  std::optional<FeatureSequence> features;  // features mode only
};

// kConfig when the model variant does not fit the mode or a needed codebook
// is missing.
InferResult Infer(const S2SModel& model, const FeatureSequence& lip, InferMode mode,
                  const Codebook* speech_codebook, const Codebook* lip_codebook);

// ---------------------------------------------------------------------------
// synthesize / evaluate

// Toy kind writes a WAV; external kind writes the unit file and sidecar.
void SynthesizeToFile(const UnitSequence& units, const VocoderSpec& spec,
                      const std::filesystem::path& out);

struct EvaluateInputs {
  std::filesystem::path manifest;
  std::filesystem::path reference_dir;  // <utt_id>.wav
  std::filesystem::path synth_dir;      // <utt_id>.wav
  std::optional<std::filesystem::path> hypothesis_dir;  // <utt_id>.txt
  std::optional<Split> split;           // restrict to one split
  std::string asr_label = "none";
};

MetricReport Evaluate(const EvaluateInputs& inputs);

// ---------------------------------------------------------------------------
// synthetic dataset

struct SyntheticDatasetSpec {
  SyntheticTaskSpec task;
  int num_utterances = 400;
  int min_symbols = 12;
  int max_symbols = 20;
  SplitRatios ratios;

  void Validate() const;
};

struct SyntheticUtterance {
  std::string utt_id;
  SyntheticPair pair;
  Split split = Split::kTrain;
};

std::vector<SyntheticUtterance> GenerateSyntheticDataset(const SyntheticDatasetSpec& spec);

// Feature files under lip/ and speech/ plus manifest.tsv.
void WriteSyntheticDataset(const SyntheticDatasetSpec& spec, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// ablation

enum class AblationVariant {
  kNoS2sPretrained,
  kNoS2sFinetuned,
  kS2sUnits,
  kS2sFeatures,
  kS2sFeaturesCtc,
};

const char* AblationVariantName(AblationVariant v);
AblationVariant ParseAblationVariant(const std::string& name);
std::vector<AblationVariant> AllAblationVariants();

struct AblationPlan {
  std::vector<AblationVariant> variants = AllAblationVariants();
  uint64_t seed = 0;
  SyntheticDatasetSpec data;
  ModelConfig model;  // variant, input and output sizes are overwritten per row
  TrainConfig train;  // variant and seed are overwritten per row
  int lip_codebook_size = 2000;
  int kmeans_max_iters = 30;
  // Extra lip-feature noise standing in for a lip encoder that was never
  // fine-tuned on the target speaker.
  double pretrained_noise_sigma = 1.0;
  VocoderSpec vocoder;

  void Validate() const;
};

struct AblationRow {
  AblationVariant variant = AblationVariant::kS2sFeatures;
  double stoi = 0.0;
  double estoi = 0.0;
  double heldout_l1 = 0.0;  // per frame, summed over feature dims
  double unit_accuracy = 0.0;
  std::vector<LogRow> log;  // empty for the untrained baselines
  double seconds = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  double mean_predictor_l1 = 0.0;  // held-out baseline for heldout_l1
  size_t num_train = 0;
  size_t num_test = 0;
  std::vector<std::string> footer;

  const AblationRow* Find(AblationVariant v) const;
  std::string ToTsv() const;
};

AblationResult RunAblation(const AblationPlan& plan, const LogFn& log = {});

}  // namespace l2s

#endif  // L2S_PIPELINE_H_
