// Data model for lip/speech feature streams, unit streams and waveforms, plus
// their on-disk formats, manifest handling and the seeded synthetic task.

#ifndef L2S_FEATUREIO_H_
#define L2S_FEATUREIO_H_

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "l2s/common.h"

namespace l2s {

namespace fs = std::filesystem;

inline constexpr uint32_t kLipFrameRateHz = 25;
inline constexpr uint32_t kSpeechFrameRateHz = 50;
inline constexpr uint32_t kAudioSampleRateHz = 16000;
inline constexpr int kSslFeatureDim = 768;

enum class FeatureKind : uint32_t { kLip = 0, kSpeech = 1 };

const char* FeatureKindName(FeatureKind kind);

// Row-major float storage matches the container payload, so reads and writes
// are bit-exact.
using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureSequence {
  FeatureMatrix frames;  // T x D
  uint32_t frame_rate_hz = kSpeechFrameRateHz;
  FeatureKind kind = FeatureKind::kSpeech;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }

  // Throws kValidation for empty or non-finite content.
  void Validate() const;
};

struct UnitSequence {
  std::vector<int32_t> ids;
  int32_t codebook_size = 0;
  uint32_t frame_rate_hz = kSpeechFrameRateHz;

  int size() const { return static_cast<int>(ids.size()); }
  void Validate() const;
};

struct Waveform {
  std::vector<double> samples;
  uint32_t sample_rate_hz = kAudioSampleRateHz;

  void Validate() const;
};

// ---------------------------------------------------------------------------
// Feature container: "L2SF", u32 version, u32 frame_rate_hz, u32 rows,
// u32 cols, [u32 kind code when version == 2], rows*cols float32 LE.

inline constexpr std::array<char, 4> kFeatureMagic = {'L', '2', 'S', 'F'};

struct ContainerHeader {
  uint32_t version = 1;
  uint32_t frame_rate_hz = 0;
  uint32_t rows = 0;
  uint32_t cols = 0;
  std::optional<uint32_t> kind_code;  // present iff version == 2
};

struct Container {
  ContainerHeader header;
  FeatureMatrix payload;
};

void WriteContainer(const fs::path& path, const ContainerHeader& header,
                    const FeatureMatrix& payload);
Container ReadContainer(const fs::path& path);
Container ParseContainer(const std::vector<char>& bytes);

void WriteFeatures(const FeatureSequence& seq, const fs::path& path);
// Kind is inferred from the frame rate (25 Hz is lip, anything else speech).
FeatureSequence ReadFeatures(const fs::path& path);
FeatureSequence ReadFeatures(const fs::path& path, FeatureKind kind);

// Unit file: space separated ids, trailing newline.
void WriteUnits(const UnitSequence& units, const fs::path& path);
UnitSequence ReadUnits(const fs::path& path, int32_t codebook_size,
                       uint32_t frame_rate_hz = kSpeechFrameRateHz);

// 16-bit PCM mono. Samples are clipped to [-1, 1] before quantization.
void WriteWav(const Waveform& wave, const fs::path& path);
Waveform ReadWav(const fs::path& path);

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kTrain, kVal, kTest };

const char* SplitName(Split split);
std::optional<Split> ParseSplit(std::string_view text);

struct UtteranceRecord {
  std::string utt_id;
  fs::path lip_feature_path;
  fs::path speech_feature_path;
  std::string transcript;
  std::optional<Split> split;

  // Throws kIo when a referenced feature file is missing.
  void Resolve() const;
};

inline constexpr const char* kManifestHeader =
    "utt_id\tlip_feat\tspeech_feat\ttranscript\tsplit";

struct ManifestOptions {
  // When false, a manifest without the split column is accepted and records
  // come back unassigned.
  bool require_split = true;
};

struct Manifest {
  std::vector<UtteranceRecord> records;
  bool has_split_column = true;

  std::vector<UtteranceRecord> BySplit(Split split) const;
};

// Relative feature paths are resolved against the manifest's directory.
Manifest LoadManifest(const fs::path& path, const ManifestOptions& options = {});
void WriteManifest(const Manifest& manifest, const fs::path& path);

struct SplitRatios {
  double train = 0.90;
  double val = 0.05;
  double test = 0.05;
};

// Validation and test sizes are round(n * ratio); train takes the remainder.
// The i-th entry is the split of the i-th id.
std::vector<Split> MakeSplit(size_t num_ids, const SplitRatios& ratios, uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic task: symbols drawn from a seeded vocabulary, rendered as one lip
// frame and two speech frames per symbol.

struct SyntheticTaskSpec {
  int vocab_size = 100;
  int lip_dim = kSslFeatureDim;
  int speech_dim = kSslFeatureDim;
  int frames_per_symbol_lip = 1;
  int frames_per_symbol_speech = 2;
  double noise_sigma = 0.0;
  uint64_t seed = 0;

  void Validate() const;
};

struct SyntheticEmbeddings {
  Eigen::MatrixXd lip;     // vocab x lip_dim
  Eigen::MatrixXd speech;  // vocab x speech_dim
};

// Rows are redrawn until every pair is at least this far apart.
inline constexpr double kMinEmbeddingSeparation = 0.5;

SyntheticEmbeddings MakeSyntheticEmbeddings(const SyntheticTaskSpec& spec);

struct SyntheticPair {
  FeatureSequence lip;
  FeatureSequence speech;
  UnitSequence target_units;  // symbol ids, each repeated per speech frame
  std::vector<int32_t> symbols;
  std::string transcript;
};

// Pure function of (spec, num_symbols, utterance_index).
SyntheticPair GenerateSyntheticPair(const SyntheticTaskSpec& spec, int num_symbols,
                                    uint64_t utterance_index = 0);
SyntheticPair GenerateSyntheticPair(const SyntheticTaskSpec& spec,
                                    const SyntheticEmbeddings& embeddings, int num_symbols,
                                    uint64_t utterance_index = 0);

std::string SymbolWord(int symbol);

}  // namespace l2s

#endif  // L2S_FEATUREIO_H_
