// Unit-to-waveform generators. The toy sine synthesizer is exactly
// invertible and stands in for a neural unit vocoder in desk-scale runs; the
// external path writes units plus a rate sidecar for an out-of-process
// vocoder.

#ifndef L2S_VOCODER_H_
#define L2S_VOCODER_H_

#include <filesystem>

#include "l2s/featureio.h"

namespace l2s {

enum class VocoderKind { kToySine, kExternal };

const char* VocoderKindName(VocoderKind kind);
VocoderKind ParseVocoderKind(const std::string& name);

struct VocoderSpec {
  VocoderKind kind = VocoderKind::kToySine;
  uint32_t sample_rate_hz = kAudioSampleRateHz;
  int samples_per_unit = 320;
  uint32_t unit_frame_rate_hz = kSpeechFrameRateHz;
  int unit_vocab = 100;
  double base_freq_hz = 200.0;
  double freq_step_hz = 60.0;

  // kConfig on rate mismatch, top frequency at or above Nyquist, or (toy)
  // a frequency step finer than one DFT bin of a unit frame.
  void Validate() const;
  double FrequencyOf(int unit) const { return base_freq_hz + unit * freq_step_hz; }
};

inline constexpr double kToyAmplitude = 0.5;

// Phase-continuous sine per unit at FrequencyOf(unit).
Waveform SynthesizeToy(const UnitSequence& units, const VocoderSpec& spec);

// Per frame, the unit whose frequency has the largest DFT magnitude.
UnitSequence AnalyzeToy(const Waveform& wave, const VocoderSpec& spec);

// Unit file plus `<path>.meta` holding `frame_rate_hz=<rate>`.
void ExportUnitsForExternal(const UnitSequence& units, const VocoderSpec& spec,
                            const std::filesystem::path& path);
std::filesystem::path SidecarPath(const std::filesystem::path& units_path);

}  // namespace l2s

#endif  // L2S_VOCODER_H_
