#include "doctest.h"

#include <cmath>
#include <numbers>

#include "l2s/metrics.h"
#include "reference_impls.h"

using namespace l2s;

namespace {

// From tests/oracles/stoi_fixture.py (pystoi).
constexpr double kFixtureStoi = 0.8575038463;
constexpr double kFixtureEstoi = 0.3689699465;

const std::filesystem::path kData = L2S_TEST_DATA_DIR;

// Amplitude-modulated harmonic tone, roughly syllabic.
Waveform Voiced(double seconds, uint64_t seed) {
  Rng rng(seed);
  Waveform w;
  const int n = static_cast<int>(seconds * 16000);
  w.samples.resize(n);
  const double f0 = 110.0 + 40.0 * rng.Uniform();
  for (int i = 0; i < n; ++i) {
    const double t = i / 16000.0;
    double s = 0.0;
    for (int k = 1; k <= 20; ++k) s += std::sin(2 * std::numbers::pi * k * f0 * t) / k;
    const double env = std::pow(std::max(0.0, std::sin(2 * std::numbers::pi * 3.3 * t)), 2);
    w.samples[i] = 0.2 * s * env;
  }
  return w;
}

Waveform AddNoise(const Waveform& clean, double snr_db, uint64_t seed) {
  Rng rng(seed);
  double p = 0.0;
  for (double v : clean.samples) p += v * v;
  p /= static_cast<double>(clean.samples.size());
  const double sigma = std::sqrt(p / std::pow(10.0, snr_db / 10.0));
  Waveform out = clean;
  for (double& v : out.samples) v += sigma * rng.Normal();
  return out;
}

std::string RandomSentence(Rng& rng, int max_words) {
  static const char* kWords[] = {"bin", "blue", "at", "f", "two", "now", "lay", "red"};
  const int n = static_cast<int>(rng.Below(max_words + 1));
  std::string s;
  for (int i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += kWords[rng.Below(8)];
  }
  return s;
}

}  // namespace

TEST_CASE("resampler output length follows ceil(n * up / down)") {
  std::vector<double> x(1001, 1.0);
  CHECK(ResamplePoly(x, 5, 8).size() == 626);
  CHECK(ResamplePoly(x, 1, 1).size() == 1001);
  // DC passes with unit gain away from the edges.
  const auto y = ResamplePoly(std::vector<double>(4000, 1.0), 5, 8);
  CHECK(y[1250] == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("STOI and ESTOI of a signal with itself are one") {
  const Waveform x = Voiced(2.0, 3);
  CHECK(std::abs(Stoi(x, x) - 1.0) <= 1e-8);
  CHECK(std::abs(Estoi(x, x) - 1.0) <= 1e-8);
}

TEST_CASE("STOI is invariant to degraded-signal gain") {
  const Waveform x = Voiced(2.0, 4);
  const Waveform y = AddNoise(x, 5.0, 9);
  Waveform y2 = y;
  for (double& v : y2.samples) v *= 3.0;
  CHECK(Stoi(x, y2) == doctest::Approx(Stoi(x, y)).epsilon(1e-9));
}

TEST_CASE("STOI and ESTOI fall strictly over the SNR ladder") {
  const Waveform x = Voiced(3.0, 5);
  double prev_s = 2.0, prev_e = 2.0;
  for (double snr : {20.0, 10.0, 0.0, -10.0}) {
    const Waveform y = AddNoise(x, snr, 17);
    const double s = Stoi(x, y);
    const double e = Estoi(x, y);
    CHECK(s < prev_s);
    CHECK(e < prev_e);
    prev_s = s;
    prev_e = e;
  }
}

TEST_CASE("STOI fixture agrees with the reference implementation") {
  const Waveform clean = ReadWav(kData / "stoi_clean.wav");
  const Waveform noisy = ReadWav(kData / "stoi_noisy.wav");
  CHECK(std::abs(Stoi(clean, noisy) - kFixtureStoi) <= 1e-3);
  CHECK(std::abs(Estoi(clean, noisy) - kFixtureEstoi) <= 1e-3);
}

TEST_CASE("STOI error paths") {
  Waveform silent;
  silent.samples.assign(32000, 0.0);
  const Waveform x = Voiced(2.0, 1);
  CHECK_THROWS_AS(Stoi(silent, x), Error);
  Waveform short_x = x;
  short_x.samples.resize(3000);
  try {
    Stoi(short_x, short_x);
    FAIL("expected insufficient");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInsufficient);
  }
  Waveform other_rate = x;
  other_rate.sample_rate_hz = 8000;
  CHECK_THROWS_AS(Stoi(x, other_rate), Error);
}

TEST_CASE("transcript normalization") {
  CHECK(NormalizeTranscript("  Bin BLUE, at f-two!  ") ==
        std::vector<std::string>{"bin", "blue", "at", "f", "two"});
  CHECK(NormalizeTranscript("...").empty());
}

TEST_CASE("WER counts on a worked example") {
  const WerCounts c = WerAlign("bin blue at f two now", "bin red at two now please");
  CHECK(c.substitutions == 1);
  CHECK(c.deletions == 1);
  CHECK(c.insertions == 1);
  CHECK(c.reference_words == 6);
  CHECK(c.rate() == doctest::Approx(0.5));
  CHECK(Wer("a b", "") == 1.0);
  CHECK(Wer("a", "a b c") == 2.0);
  CHECK_THROWS_AS(Wer("", "a"), Error);
}

TEST_CASE("WER matches an independent edit-distance oracle on random pairs") {
  Rng rng(2024);
  int done = 0;
  while (done < 200) {
    const std::string r = RandomSentence(rng, 9);
    const std::string h = RandomSentence(rng, 9);
    if (NormalizeTranscript(r).empty()) continue;
    const WerCounts c = WerAlign(r, h);
    const int oracle = ref::EditDistance(NormalizeTranscript(r), NormalizeTranscript(h));
    CHECK(c.edits() == oracle);
    CHECK(c.rate() == static_cast<double>(oracle) / static_cast<double>(c.reference_words));
    ++done;
  }
}

TEST_CASE("metric report aggregates and formats") {
  MetricReport r;
  r.asr_label = "whisper-small";
  r.per_utterance.push_back({"u1", 0.5, 0.4, WerCounts{1, 0, 0, 4}});
  r.per_utterance.push_back({"u2", 0.7, 0.6, WerCounts{0, 1, 1, 6}});
  CHECK(r.MeanStoi() == doctest::Approx(0.6));
  CHECK(r.MeanEstoi() == doctest::Approx(0.5));
  CHECK(*r.CorpusWer() == doctest::Approx(0.3));
  const std::string tsv = r.ToTsv({"seed=1"});
  CHECK(tsv.find("ALL\t") != std::string::npos);
  CHECK(tsv.find("# asr=whisper-small") != std::string::npos);
  CHECK(tsv.find("# seed=1") != std::string::npos);
  MetricReport no_wer;
  no_wer.per_utterance.push_back({"u", 0.5, 0.5, std::nullopt});
  CHECK(!no_wer.CorpusWer().has_value());
}
