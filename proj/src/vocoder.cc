#include "l2s/vocoder.h"

#include <cmath>
#include <fstream>
#include <numbers>

#include "l2s/common.h"

namespace l2s {

const char* VocoderKindName(VocoderKind kind) {
  return kind == VocoderKind::kToySine ? "toy_sine" : "external";
}

VocoderKind ParseVocoderKind(const std::string& name) {
  if (name == "toy_sine") return VocoderKind::kToySine;
  if (name == "external") return VocoderKind::kExternal;
  throw Error(ErrorKind::kConfig, "unknown vocoder kind '" + name + "'");
}

void VocoderSpec::Validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kConfig, m); };
  if (samples_per_unit < 1 || unit_frame_rate_hz == 0 || unit_vocab < 1) {
    fail("samples_per_unit, unit rate and unit_vocab must be positive");
  }
  if (static_cast<uint64_t>(samples_per_unit) * unit_frame_rate_hz != sample_rate_hz) {
    fail("samples_per_unit * unit_frame_rate_hz must equal sample_rate_hz");
  }
  if (kind != VocoderKind::kToySine) return;
  const double bin = static_cast<double>(sample_rate_hz) / samples_per_unit;
  if (!(base_freq_hz > 0.0)) fail("base_freq_hz must be > 0");
  if (freq_step_hz < bin) {
    fail("freq_step_hz " + std::to_string(freq_step_hz) + " is below the frame resolution " +
         std::to_string(bin) + " Hz");
  }
  if (FrequencyOf(unit_vocab - 1) >= sample_rate_hz / 2.0) {
    fail("highest unit frequency reaches Nyquist");
  }
}

Waveform SynthesizeToy(const UnitSequence& units, const VocoderSpec& spec) {
  spec.Validate();
  Waveform w;
  w.sample_rate_hz = spec.sample_rate_hz;
  w.samples.reserve(units.ids.size() * spec.samples_per_unit);
  const double dt = 1.0 / spec.sample_rate_hz;
  double phase = 0.0;
  for (size_t i = 0; i < units.ids.size(); ++i) {
    const int u = units.ids[i];
    if (u < 0 || u >= spec.unit_vocab) {
      throw Error(ErrorKind::kValidation, "unit " + std::to_string(u) + " at frame " +
                                              std::to_string(i) + " outside vocab " +
                                              std::to_string(spec.unit_vocab));
    }
    const double step = 2.0 * std::numbers::pi * spec.FrequencyOf(u) * dt;
    for (int n = 0; n < spec.samples_per_unit; ++n) {
      w.samples.push_back(kToyAmplitude * std::sin(phase));
      phase = std::fmod(phase + step, 2.0 * std::numbers::pi);
    }
  }
  return w;
}

UnitSequence AnalyzeToy(const Waveform& wave, const VocoderSpec& spec) {
  spec.Validate();
  const size_t hop = static_cast<size_t>(spec.samples_per_unit);
  if (wave.samples.size() % hop != 0) {
    throw Error(ErrorKind::kShape, "waveform length " + std::to_string(wave.samples.size()) +
                                       " is not a multiple of " + std::to_string(hop));
  }
  UnitSequence out;
  out.codebook_size = spec.unit_vocab;
  out.frame_rate_hz = spec.unit_frame_rate_hz;
  const double dt = 1.0 / spec.sample_rate_hz;
  for (size_t f = 0; f < wave.samples.size() / hop; ++f) {
    const double* x = wave.samples.data() + f * hop;
    int best = -1;
    double best_mag = 0.0;
    for (int u = 0; u < spec.unit_vocab; ++u) {
      const double w = 2.0 * std::numbers::pi * spec.FrequencyOf(u) * dt;
      double re = 0.0, im = 0.0;
      for (size_t n = 0; n < hop; ++n) {
        re += x[n] * std::cos(w * n);
        im -= x[n] * std::sin(w * n);
      }
      const double mag = re * re + im * im;
      if (mag > best_mag) {
        best_mag = mag;
        best = u;
      }
    }
    if (best < 0 || best_mag < 1e-18) {
      throw Error(ErrorKind::kValidation,
                  "frame " + std::to_string(f) + " has no dominant frequency");
    }
    out.ids.push_back(best);
  }
  return out;
}

std::filesystem::path SidecarPath(const std::filesystem::path& units_path) {
  return std::filesystem::path(units_path.string() + ".meta");
}

void ExportUnitsForExternal(const UnitSequence& units, const VocoderSpec& spec,
                            const std::filesystem::path& path) {
  UnitSequence u = units;
  u.codebook_size = spec.unit_vocab;
  u.Validate();
  WriteUnits(u, path);
  std::ofstream meta(SidecarPath(path));
  if (!meta) throw Error(ErrorKind::kIo, "cannot write " + SidecarPath(path).string());
  meta << "frame_rate_hz=" << spec.unit_frame_rate_hz << "\n";
}

}  // namespace l2s
