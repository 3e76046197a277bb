#include "doctest.h"

#include "l2s/vocoder.h"
#include "test_util.h"

using namespace l2s;

TEST_CASE("toy vocoder round trips random unit sequences") {
  VocoderSpec spec;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    UnitSequence u;
    u.codebook_size = spec.unit_vocab;
    for (int i = 0; i < 50; ++i) u.ids.push_back(static_cast<int32_t>(rng.Below(spec.unit_vocab)));
    const Waveform w = SynthesizeToy(u, spec);
    REQUIRE(w.samples.size() == 50u * spec.samples_per_unit);
    CHECK(w.sample_rate_hz == 16000);
    CHECK(AnalyzeToy(w, spec).ids == u.ids);
  }
}

TEST_CASE("toy waveform is phase continuous and bounded") {
  VocoderSpec spec;
  const Waveform w = SynthesizeToy(UnitSequence{{3, 3, 90, 0}, 100}, spec);
  double max_jump = 0.0, peak = 0.0;
  for (size_t i = 1; i < w.samples.size(); ++i) {
    max_jump = std::max(max_jump, std::abs(w.samples[i] - w.samples[i - 1]));
    peak = std::max(peak, std::abs(w.samples[i]));
  }
  // The largest per-sample step of a sine is 2*pi*f/sr times its amplitude.
  const double bound = kToyAmplitude * 2 * 3.14159265358979 * spec.FrequencyOf(90) / 16000.0;
  CHECK(max_jump <= bound + 1e-12);
  CHECK(peak <= kToyAmplitude);
}

TEST_CASE("toy vocoder validates its inputs") {
  VocoderSpec spec;
  CHECK_THROWS_AS(SynthesizeToy(UnitSequence{{100}, 100}, spec), Error);
  CHECK_THROWS_AS(SynthesizeToy(UnitSequence{{-1}, 100}, spec), Error);
  Waveform odd;
  odd.samples.assign(321, 0.1);
  CHECK_THROWS_AS(AnalyzeToy(odd, spec), Error);
  Waveform silent;
  silent.samples.assign(640, 0.0);
  CHECK_THROWS_AS(AnalyzeToy(silent, spec), Error);

  VocoderSpec bad = spec;
  bad.samples_per_unit = 300;
  CHECK_THROWS_AS(bad.Validate(), Error);
  bad = spec;
  bad.freq_step_hz = 40.0;  // finer than one 50 Hz bin
  CHECK_THROWS_AS(bad.Validate(), Error);
  bad = spec;
  bad.unit_vocab = 200;  // top tone above Nyquist
  CHECK_THROWS_AS(bad.Validate(), Error);
}

TEST_CASE("external export writes units and a rate sidecar") {
  TempDir dir;
  VocoderSpec spec;
  spec.kind = VocoderKind::kExternal;
  const UnitSequence u{{1, 2, 3}, 100};
  ExportUnitsForExternal(u, spec, dir.path() / "a.units");
  CHECK(ReadUnits(dir.path() / "a.units", 100).ids == u.ids);
  CHECK(Slurp(SidecarPath(dir.path() / "a.units")) == "frame_rate_hz=50\n");
  CHECK(ParseVocoderKind(VocoderKindName(VocoderKind::kExternal)) == VocoderKind::kExternal);
  CHECK_THROWS_AS(ParseVocoderKind("hifigan"), Error);
}
