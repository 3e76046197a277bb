#include "l2s/metrics.h"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <complex>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "l2s/common.h"

namespace l2s {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();
// Anti-alias design of Octave's resample(): 60 dB rejection, roll-off one
// tenth of the stop-band edge.
constexpr double kRejectionDb = 60.0;
constexpr double kKaiserBeta = 0.1102 * (kRejectionDb - 8.7);

std::vector<double> Hanning(int n) {
  // Symmetric window without its zero end points, as MATLAB's hanning(n).
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 1) / (n + 1));
  }
  return w;
}

// Frames start at 0, hop, ... strictly before len - framelen.
size_t NumFrames(size_t len, size_t framelen, size_t hop) {
  if (len <= framelen) return 0;
  return (len - framelen - 1) / hop + 1;
}

// Drops frames more than `dyn_range` dB below the loudest reference frame and
// overlap-adds what is left for both signals.
void RemoveSilentFrames(std::vector<double>& x, std::vector<double>& y) {
  const size_t framelen = kStoiFrameLen;
  const size_t hop = framelen / 2;
  const std::vector<double> w = Hanning(kStoiFrameLen);
  const size_t nf = NumFrames(x.size(), framelen, hop);
  std::vector<double> energy(nf);
  for (size_t f = 0; f < nf; ++f) {
    double s = 0.0;
    for (size_t i = 0; i < framelen; ++i) s += std::pow(w[i] * x[f * hop + i], 2);
    energy[f] = 20.0 * std::log10(std::sqrt(s) + kEps);
  }
  const double top = nf ? *std::max_element(energy.begin(), energy.end()) : 0.0;
  std::vector<size_t> keep;
  for (size_t f = 0; f < nf; ++f) {
    if (top - kStoiDynRangeDb - energy[f] < 0.0) keep.push_back(f);
  }
  const size_t out_len = keep.empty() ? 0 : (keep.size() - 1) * hop + framelen;
  std::vector<double> xs(out_len, 0.0), ys(out_len, 0.0);
  for (size_t k = 0; k < keep.size(); ++k) {
    const size_t src = keep[k] * hop;
    for (size_t i = 0; i < framelen; ++i) {
      xs[k * hop + i] += w[i] * x[src + i];
      ys[k * hop + i] += w[i] * y[src + i];
    }
  }
  x = std::move(xs);
  y = std::move(ys);
}

// One-third octave band envelopes, bands x frames.
Eigen::MatrixXd BandEnvelopes(const std::vector<double>& x) {
  const size_t framelen = kStoiFrameLen;
  const size_t hop = framelen / 2;
  const int bins = kStoiFftSize / 2 + 1;
  const std::vector<double> w = Hanning(kStoiFrameLen);

  // Band edges snap to the nearest FFT bin; [lo, hi) per band.
  std::vector<int> lo(kStoiBands), hi(kStoiBands);
  auto nearest_bin = [&](double freq) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * kStoiSampleRateHz / kStoiFftSize;
      const double d = (f - freq) * (f - freq);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  };
  for (int b = 0; b < kStoiBands; ++b) {
    lo[b] = nearest_bin(kStoiMinFreqHz * std::pow(2.0, (2.0 * b - 1.0) / 6.0));
    hi[b] = nearest_bin(kStoiMinFreqHz * std::pow(2.0, (2.0 * b + 1.0) / 6.0));
  }

  const size_t nf = NumFrames(x.size(), framelen, hop);
  Eigen::MatrixXd env(kStoiBands, static_cast<Eigen::Index>(nf));
  Eigen::FFT<double> fft;
  std::vector<double> buf(kStoiFftSize);
  std::vector<std::complex<double>> spec;
  for (size_t f = 0; f < nf; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (size_t i = 0; i < framelen; ++i) buf[i] = w[i] * x[f * hop + i];
    fft.fwd(spec, buf);
    for (int b = 0; b < kStoiBands; ++b) {
      double p = 0.0;
      for (int k = lo[b]; k < hi[b]; ++k) p += std::norm(spec[k]);
      env(b, static_cast<Eigen::Index>(f)) = std::sqrt(p);
    }
  }
  return env;
}

struct Envelopes {
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;
};

Envelopes Prepare(const Waveform& reference, const Waveform& degraded) {
  if (reference.sample_rate_hz != degraded.sample_rate_hz) {
    throw Error(ErrorKind::kValidation, "reference and degraded sample rates differ");
  }
  reference.Validate();
  degraded.Validate();
  const size_t n = std::min(reference.samples.size(), degraded.samples.size());
  std::vector<double> x(reference.samples.begin(), reference.samples.begin() + n);
  std::vector<double> y(degraded.samples.begin(), degraded.samples.begin() + n);
  if (std::all_of(x.begin(), x.end(), [](double v) { return v == 0.0; })) {
    throw Error(ErrorKind::kValidation, "reference signal is silent");
  }
  const int fs = static_cast<int>(reference.sample_rate_hz);
  if (fs != kStoiSampleRateHz) {
    x = ResamplePoly(x, kStoiSampleRateHz, fs);
    y = ResamplePoly(y, kStoiSampleRateHz, fs);
  }
  RemoveSilentFrames(x, y);
  Envelopes e{BandEnvelopes(x), BandEnvelopes(y)};
  if (e.x.cols() < kStoiSegmentFrames) {
    throw Error(ErrorKind::kInsufficient,
                std::to_string(e.x.cols()) + " analysis frames after silence removal, need " +
                    std::to_string(kStoiSegmentFrames));
  }
  return e;
}

// Centre and scale to unit norm; a zero vector stays zero.
Eigen::VectorXd Standardize(const Eigen::VectorXd& v) {
  Eigen::VectorXd c = v.array() - v.mean();
  const double n = c.norm();
  return n > 0.0 ? Eigen::VectorXd(c / n) : c;
}

}  // namespace

std::vector<double> ResamplePoly(const std::vector<double>& x, int up, int down) {
  if (up < 1 || down < 1) throw Error(ErrorKind::kConfig, "resampling factors must be positive");
  const int g = std::gcd(up, down);
  const long p = up / g;
  const long q = down / g;
  if (p == 1 && q == 1) return x;

  const double fc = 0.5 / static_cast<double>(std::max(p, q));
  const long half = static_cast<long>(std::ceil((kRejectionDb - 8.0) / (28.714 * fc / 10.0)));
  const long len = 2 * half + 1;
  const double i0b = std::cyl_bessel_i(0.0, kKaiserBeta);
  std::vector<double> h(len);
  double sum = 0.0;
  for (long n = 0; n < len; ++n) {
    const double t = static_cast<double>(n - half);
    const double arg = 2.0 * fc * t;
    const double sinc = t == 0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
    const double r = static_cast<double>(n - half) / half;
    const double win = std::cyl_bessel_i(0.0, kKaiserBeta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0b;
    h[n] = 2.0 * fc * sinc * win;
    sum += h[n];
  }
  for (double& v : h) v *= static_cast<double>(p) / sum;

  const long n_in = static_cast<long>(x.size());
  const long n_out = (n_in * p + q - 1) / q;
  std::vector<double> y(n_out, 0.0);
  for (long m = 0; m < n_out; ++m) {
    // y[m] = sum_k x[k] h[m q + half - k p]
    const long c = m * q + half;
    const long k_hi = std::min(n_in - 1, c / p);
    long k_lo = c - (len - 1) <= 0 ? 0 : (c - (len - 1) + p - 1) / p;
    double acc = 0.0;
    for (long k = k_lo; k <= k_hi; ++k) acc += x[k] * h[c - k * p];
    y[m] = acc;
  }
  return y;
}

double Stoi(const Waveform& reference, const Waveform& degraded) {
  const Envelopes e = Prepare(reference, degraded);
  const double clip = std::pow(10.0, -kStoiBetaDb / 20.0);
  const Eigen::Index frames = e.x.cols();
  const Eigen::Index segments = frames - kStoiSegmentFrames + 1;
  double total = 0.0;
  for (Eigen::Index m = 0; m < segments; ++m) {
    for (int b = 0; b < kStoiBands; ++b) {
      const Eigen::VectorXd xs = e.x.row(b).segment(m, kStoiSegmentFrames).transpose();
      const Eigen::VectorXd ys = e.y.row(b).segment(m, kStoiSegmentFrames).transpose();
      const double alpha = xs.norm() / (ys.norm() + kEps);
      const Eigen::VectorXd yp = (alpha * ys).cwiseMin(xs * (1.0 + clip));
      Eigen::VectorXd xc = xs.array() - xs.mean();
      Eigen::VectorXd yc = yp.array() - yp.mean();
      xc /= xc.norm() + kEps;
      yc /= yc.norm() + kEps;
      total += xc.dot(yc);
    }
  }
  return total / (static_cast<double>(segments) * kStoiBands);
}

double Estoi(const Waveform& reference, const Waveform& degraded) {
  const Envelopes e = Prepare(reference, degraded);
  const Eigen::Index segments = e.x.cols() - kStoiSegmentFrames + 1;
  auto normalize = [](Eigen::MatrixXd s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) s.row(r) = Standardize(s.row(r).transpose());
    for (Eigen::Index c = 0; c < s.cols(); ++c) s.col(c) = Standardize(s.col(c));
    return s;
  };
  double total = 0.0;
  for (Eigen::Index m = 0; m < segments; ++m) {
    const Eigen::MatrixXd xn = normalize(e.x.middleCols(m, kStoiSegmentFrames));
    const Eigen::MatrixXd yn = normalize(e.y.middleCols(m, kStoiSegmentFrames));
    total += (xn.array() * yn.array()).sum() / kStoiSegmentFrames;
  }
  return total / static_cast<double>(segments);
}

std::vector<std::string> NormalizeTranscript(const std::string& text) {
  std::string s;
  s.reserve(text.size());
  for (unsigned char c : text) {
    if (c < 0x80 && (std::ispunct(c) || std::isspace(c))) {
      s.push_back(' ');
    } else {
      s.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  std::vector<std::string> words;
  std::istringstream in(s);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

WerCounts WerAlign(const std::string& reference, const std::string& hypothesis) {
  const std::vector<std::string> r = NormalizeTranscript(reference);
  const std::vector<std::string> h = NormalizeTranscript(hypothesis);
  if (r.empty()) throw Error(ErrorKind::kValidation, "reference transcript has no words");
  const size_t n = r.size(), m = h.size();
  // cost[i][j] over prefixes; backtrace prefers substitution, then deletion.
  std::vector<std::vector<int>> cost(n + 1, std::vector<int>(m + 1));
  for (size_t i = 0; i <= n; ++i) cost[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= m; ++j) cost[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      const int sub = cost[i - 1][j - 1] + (r[i - 1] == h[j - 1] ? 0 : 1);
      cost[i][j] = std::min({sub, cost[i - 1][j] + 1, cost[i][j - 1] + 1});
    }
  }
  WerCounts c;
  c.reference_words = static_cast<int>(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && cost[i][j] == cost[i - 1][j - 1] + (r[i - 1] == h[j - 1] ? 0 : 1)) {
      if (r[i - 1] != h[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

double Wer(const std::string& reference, const std::string& hypothesis) {
  return WerAlign(reference, hypothesis).rate();
}

double MetricReport::MeanStoi() const {
  if (per_utterance.empty()) return 0.0;
  double s = 0.0;
  for (const auto& u : per_utterance) s += u.stoi;
  return s / static_cast<double>(per_utterance.size());
}

double MetricReport::MeanEstoi() const {
  if (per_utterance.empty()) return 0.0;
  double s = 0.0;
  for (const auto& u : per_utterance) s += u.estoi;
  return s / static_cast<double>(per_utterance.size());
}

std::optional<double> MetricReport::CorpusWer() const {
  long edits = 0, words = 0;
  for (const auto& u : per_utterance) {
    if (!u.wer) continue;
    edits += u.wer->edits();
    words += u.wer->reference_words;
  }
  if (words == 0) return std::nullopt;
  return static_cast<double>(edits) / static_cast<double>(words);
}

namespace {

std::string Fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string MetricReport::ToTsv(const std::vector<std::string>& footer) const {
  std::string s = "utt_id\tstoi\testoi\twer\n";
  for (const auto& u : per_utterance) {
    s += u.utt_id + "\t" + Fixed(u.stoi, 6) + "\t" + Fixed(u.estoi, 6) + "\t" +
         (u.wer ? Fixed(u.wer->rate(), 6) : std::string("nan")) + "\n";
  }
  const auto cw = CorpusWer();
  s += "ALL\t" + Fixed(MeanStoi(), 6) + "\t" + Fixed(MeanEstoi(), 6) + "\t" +
       (cw ? Fixed(*cw, 6) : std::string("nan")) + "\n";
  s += "# asr=" + asr_label + "\n";
  for (const auto& f : footer) s += "# " + f + "\n";
  return s;
}

std::string MetricReport::ToTable(const std::string& system_name) const {
  char buf[256];
  const auto cw = CorpusWer();
  std::string s;
  std::snprintf(buf, sizeof(buf), "%-24s %8s %8s %8s\n", "Method", "STOI", "ESTOI", "WER(%)");
  s += buf;
  std::snprintf(buf, sizeof(buf), "%-24s %8.3f %8.3f %8s\n", system_name.c_str(), MeanStoi(),
                MeanEstoi(), cw ? Fixed(*cw * 100.0, 2).c_str() : "-");
  s += buf;
  s += "(ASR for WER: " + asr_label + ")\n";
  return s;
}

}  // namespace l2s
