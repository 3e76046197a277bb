// Objective evaluation: STOI, ESTOI and word error rate.

#ifndef L2S_METRICS_H_
#define L2S_METRICS_H_

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "l2s/featureio.h"

namespace l2s {

// Polyphase rational resampler with the Octave resample() prototype filter:
// Kaiser-windowed sinc cut off at the lower Nyquist, 60 dB rejection.
// Output length is ceil(n * up / down), as with scipy's resample_poly.
std::vector<double> ResamplePoly(const std::vector<double>& x, int up, int down);

inline constexpr int kStoiSampleRateHz = 10000;
inline constexpr int kStoiFrameLen = 256;
inline constexpr int kStoiFftSize = 512;
inline constexpr int kStoiBands = 15;
inline constexpr double kStoiMinFreqHz = 150.0;
inline constexpr int kStoiSegmentFrames = 30;
inline constexpr double kStoiBetaDb = -15.0;
inline constexpr double kStoiDynRangeDb = 40.0;

// Both signals are trimmed to the shorter length and resampled to 10 kHz.
// kValidation for an all-silent reference; kInsufficient when fewer than 30
// analysis frames survive silence removal.
double Stoi(const Waveform& reference, const Waveform& degraded);
double Estoi(const Waveform& reference, const Waveform& degraded);

// Lowercase, punctuation to spaces, whitespace collapsed, split into words.
std::vector<std::string> NormalizeTranscript(const std::string& text);

struct WerCounts {
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int reference_words = 0;

  int edits() const { return substitutions + deletions + insertions; }
  double rate() const { return static_cast<double>(edits()) / reference_words; }
};

// Minimum edit alignment over normalized words. kValidation when the
// reference is empty after normalization.
WerCounts WerAlign(const std::string& reference, const std::string& hypothesis);
double Wer(const std::string& reference, const std::string& hypothesis);

struct UtteranceMetrics {
  std::string utt_id;
  double stoi = 0.0;
  double estoi = 0.0;
  std::optional<WerCounts> wer;  // absent when no hypothesis transcript exists
};

struct MetricReport {
  std::vector<UtteranceMetrics> per_utterance;
  std::string asr_label = "none";

  double MeanStoi() const;
  double MeanEstoi() const;
  // Total edits over total reference words; nullopt when no utterance has WER.
  std::optional<double> CorpusWer() const;

  // `utt_id  stoi  estoi  wer` rows, an `ALL` row, then `#` footer lines.
  std::string ToTsv(const std::vector<std::string>& footer = {}) const;
  // Aggregate table in the STOI / ESTOI / WER layout.
  std::string ToTable(const std::string& system_name) const;
};

}  // namespace l2s

#endif  // L2S_METRICS_H_
