#include "l2s/objectives.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "l2s/common.h"

namespace l2s {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double LogAdd(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

void LossWeights::Validate() const {
  if (!std::isfinite(alpha_ctc) || !std::isfinite(alpha_l1) || alpha_ctc < 0 || alpha_l1 < 0) {
    throw Error(ErrorKind::kConfig, "loss weights must be finite and nonnegative");
  }
}

Eigen::MatrixXd LogSoftmaxRows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double m = logits.row(t).maxCoeff();
    out.row(t) = logits.row(t).array() - m;
    out.row(t).array() -= std::log(out.row(t).array().exp().sum());
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void CheckUnitTargets(const Eigen::MatrixXd& logits, const UnitSequence& targets) {
  if (targets.size() != logits.rows()) {
    throw Error(ErrorKind::kShape, "unit target length " + std::to_string(targets.size()) +
                                       " != logit frames " + std::to_string(logits.rows()));
  }
  if (logits.rows() == 0) throw Error(ErrorKind::kShape, "no frames for cross-entropy");
  for (int32_t id : targets.ids) {
    if (id < 0 || id >= logits.cols()) {
      throw Error(ErrorKind::kValidation, "target unit " + std::to_string(id) +
                                              " outside [0, " + std::to_string(logits.cols()) + ")");
    }
  }
}

}  // namespace

double CrossEntropyUnits(const Eigen::MatrixXd& logits, const UnitSequence& targets) {
  CheckUnitTargets(logits, targets);
  const Eigen::MatrixXd lp = LogSoftmaxRows(logits);
  double sum = 0.0;
  for (Eigen::Index t = 0; t < lp.rows(); ++t) sum -= lp(t, targets.ids[t]);
  return sum / static_cast<double>(lp.rows());
}

LossAndGrad CrossEntropyUnitsWithGrad(const Eigen::MatrixXd& logits, const UnitSequence& targets) {
  CheckUnitTargets(logits, targets);
  const Eigen::MatrixXd lp = LogSoftmaxRows(logits);
  const double inv_t = 1.0 / static_cast<double>(lp.rows());
  LossAndGrad out;
  out.grad = lp.array().exp() * inv_t;
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    out.loss -= lp(t, targets.ids[t]);
    out.grad(t, targets.ids[t]) -= inv_t;
  }
  out.loss *= inv_t;
  return out;
}

// ---------------------------------------------------------------------------

LossAndGrad L1FeaturesWithGrad(const Eigen::MatrixXd& pred, const FeatureSequence& target,
                               const L1Options& options) {
  if (pred.cols() != target.dim()) {
    throw Error(ErrorKind::kShape, "prediction dim " + std::to_string(pred.cols()) +
                                       " != target dim " + std::to_string(target.dim()));
  }
  if (pred.rows() == 0 || target.num_frames() == 0) {
    throw Error(ErrorKind::kShape, "L1 needs at least one frame");
  }
  // Frames past the end of the target would be padding copies; they are
  // masked, so only the overlap contributes.
  const Eigen::Index valid = std::min<Eigen::Index>(pred.rows(), target.num_frames());
  double scale = 1.0 / static_cast<double>(valid);
  if (options.average_over_dims) scale /= static_cast<double>(pred.cols());

  LossAndGrad out;
  out.grad = Eigen::MatrixXd::Zero(pred.rows(), pred.cols());
  double sum = 0.0;
  for (Eigen::Index t = 0; t < valid; ++t) {
    for (Eigen::Index d = 0; d < pred.cols(); ++d) {
      const double diff = pred(t, d) - static_cast<double>(target.frames(t, d));
      sum += std::abs(diff);
      out.grad(t, d) = diff > 0 ? scale : (diff < 0 ? -scale : 0.0);
    }
  }
  out.loss = sum * scale;
  return out;
}

double L1Features(const Eigen::MatrixXd& pred, const FeatureSequence& target,
                  const L1Options& options) {
  return L1FeaturesWithGrad(pred, target, options).loss;
}

// ---------------------------------------------------------------------------

int CtcMinFrames(const std::vector<int>& tokens) {
  int frames = static_cast<int>(tokens.size());
  for (size_t i = 1; i < tokens.size(); ++i) {
    if (tokens[i] == tokens[i - 1]) ++frames;
  }
  return frames;
}

namespace {

struct CtcLattice {
  std::vector<int> ext;        // blank-augmented labels, length 2L+1
  Eigen::MatrixXd log_alpha;   // T x S, includes emission at t
  double log_likelihood = 0.0;
};

void CheckCtcInputs(const Eigen::MatrixXd& m, const std::vector<int>& tokens) {
  if (m.rows() == 0) throw Error(ErrorKind::kShape, "CTC needs at least one frame");
  for (int tok : tokens) {
    if (tok <= kCtcBlank || tok >= m.cols()) {
      throw Error(ErrorKind::kValidation, "CTC token " + std::to_string(tok) + " outside [1, " +
                                              std::to_string(m.cols() - 1) + "]");
    }
  }
  const int need = CtcMinFrames(tokens);
  if (need > m.rows()) {
    throw Error(ErrorKind::kInfeasible, "target needs " + std::to_string(need) +
                                            " frames but only " + std::to_string(m.rows()) +
                                            " are available");
  }
}

CtcLattice ForwardLattice(const Eigen::MatrixXd& lp, const std::vector<int>& tokens) {
  CtcLattice lat;
  lat.ext.reserve(2 * tokens.size() + 1);
  lat.ext.push_back(kCtcBlank);
  for (int tok : tokens) {
    lat.ext.push_back(tok);
    lat.ext.push_back(kCtcBlank);
  }
  const Eigen::Index frames = lp.rows();
  const auto states = static_cast<Eigen::Index>(lat.ext.size());
  lat.log_alpha = Eigen::MatrixXd::Constant(frames, states, kNegInf);
  lat.log_alpha(0, 0) = lp(0, lat.ext[0]);
  if (states > 1) lat.log_alpha(0, 1) = lp(0, lat.ext[1]);
  for (Eigen::Index t = 1; t < frames; ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double acc = lat.log_alpha(t - 1, s);
      if (s >= 1) acc = LogAdd(acc, lat.log_alpha(t - 1, s - 1));
      if (s >= 2 && lat.ext[s] != kCtcBlank && lat.ext[s] != lat.ext[s - 2]) {
        acc = LogAdd(acc, lat.log_alpha(t - 1, s - 2));
      }
      if (acc != kNegInf) lat.log_alpha(t, s) = acc + lp(t, lat.ext[s]);
    }
  }
  double ll = lat.log_alpha(frames - 1, states - 1);
  if (states > 1) ll = LogAdd(ll, lat.log_alpha(frames - 1, states - 2));
  lat.log_likelihood = ll;
  return lat;
}

}  // namespace

double CtcLoss(const Eigen::MatrixXd& log_probs, const std::vector<int>& tokens) {
  CheckCtcInputs(log_probs, tokens);
  const CtcLattice lat = ForwardLattice(log_probs, tokens);
  return -lat.log_likelihood;
}

LossAndGrad CtcLossWithGrad(const Eigen::MatrixXd& logits, const std::vector<int>& tokens) {
  CheckCtcInputs(logits, tokens);
  const Eigen::MatrixXd lp = LogSoftmaxRows(logits);
  const CtcLattice lat = ForwardLattice(lp, tokens);
  const Eigen::Index frames = lp.rows();
  const auto states = static_cast<Eigen::Index>(lat.ext.size());

  // log_beta(t, s): log probability of emitting frames t+1.. given state s at t.
  Eigen::MatrixXd log_beta = Eigen::MatrixXd::Constant(frames, states, kNegInf);
  log_beta(frames - 1, states - 1) = 0.0;
  if (states > 1) log_beta(frames - 1, states - 2) = 0.0;
  for (Eigen::Index t = frames - 2; t >= 0; --t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double acc = log_beta(t + 1, s) + lp(t + 1, lat.ext[s]);
      if (s + 1 < states) acc = LogAdd(acc, log_beta(t + 1, s + 1) + lp(t + 1, lat.ext[s + 1]));
      if (s + 2 < states && lat.ext[s + 2] != kCtcBlank && lat.ext[s + 2] != lat.ext[s]) {
        acc = LogAdd(acc, log_beta(t + 1, s + 2) + lp(t + 1, lat.ext[s + 2]));
      }
      log_beta(t, s) = acc;
    }
  }

  LossAndGrad out;
  out.loss = -lat.log_likelihood;
  out.grad = lp.array().exp();
  for (Eigen::Index t = 0; t < frames; ++t) {
    Eigen::VectorXd occupancy = Eigen::VectorXd::Constant(lp.cols(), kNegInf);
    for (Eigen::Index s = 0; s < states; ++s) {
      const double v = lat.log_alpha(t, s) + log_beta(t, s);
      occupancy(lat.ext[s]) = LogAdd(occupancy(lat.ext[s]), v);
    }
    for (Eigen::Index k = 0; k < lp.cols(); ++k) {
      if (occupancy(k) != kNegInf) out.grad(t, k) -= std::exp(occupancy(k) - lat.log_likelihood);
    }
  }
  return out;
}

double TotalLoss(double l1, double ctc, const LossWeights& weights) {
  weights.Validate();
  if (!std::isfinite(l1)) throw Error(ErrorKind::kNumeric, "L1 loss is not finite");
  if (!std::isfinite(ctc)) throw Error(ErrorKind::kNumeric, "CTC loss is not finite");
  return weights.alpha_ctc * ctc + weights.alpha_l1 * l1;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> Utf8CodePoints(const std::string& s) {
  std::vector<std::string> out;
  for (size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

std::string HexEncode(const std::string& s) {
  static const char* kHex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out.push_back(kHex[c >> 4]);
    out.push_back(kHex[c & 15]);
  }
  return out;
}

std::string HexDecode(const std::string& s) {
  if (s.size() % 2) throw Error(ErrorKind::kFormat, "odd-length hex symbol in tokenizer");
  std::string out;
  for (size_t i = 0; i < s.size(); i += 2) {
    out.push_back(static_cast<char>(std::stoi(s.substr(i, 2), nullptr, 16)));
  }
  return out;
}

}  // namespace

std::vector<std::string> CtcTokenizer::Symbols(const std::string& transcript) const {
  if (granularity_ == Granularity::kCharacter) return Utf8CodePoints(transcript);
  std::vector<std::string> words;
  std::istringstream in(transcript);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

CtcTokenizer CtcTokenizer::Build(const std::vector<std::string>& transcripts,
                                 Granularity granularity) {
  CtcTokenizer tok;
  tok.granularity_ = granularity;
  std::set<std::string> inventory;
  for (const auto& t : transcripts) {
    for (auto& sym : tok.Symbols(t)) inventory.insert(std::move(sym));
  }
  for (const auto& sym : inventory) {
    tok.ids_[sym] = static_cast<int>(tok.symbols_.size()) + 1;
    tok.symbols_.push_back(sym);
  }
  return tok;
}

std::vector<int> CtcTokenizer::Encode(const std::string& transcript) const {
  std::vector<int> out;
  for (const auto& sym : Symbols(transcript)) {
    const auto it = ids_.find(sym);
    if (it == ids_.end()) {
      throw Error(ErrorKind::kValidation, "symbol '" + sym + "' is not in the CTC inventory");
    }
    out.push_back(it->second);
  }
  return out;
}

std::string CtcTokenizer::Decode(const std::vector<int>& tokens) const {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 1 || tokens[i] > vocab_size()) {
      throw Error(ErrorKind::kValidation, "token " + std::to_string(tokens[i]) + " out of range");
    }
    if (i && granularity_ == Granularity::kWord) out.push_back(' ');
    out += symbols_[tokens[i] - 1];
  }
  return out;
}

std::string CtcTokenizer::Serialize() const {
  std::string out = granularity_ == Granularity::kCharacter ? "char:" : "word:";
  for (size_t i = 0; i < symbols_.size(); ++i) {
    if (i) out.push_back(',');
    out += HexEncode(symbols_[i]);
  }
  return out;
}

CtcTokenizer CtcTokenizer::Parse(const std::string& serialized) {
  CtcTokenizer tok;
  const auto colon = serialized.find(':');
  if (colon == std::string::npos) throw Error(ErrorKind::kFormat, "tokenizer missing granularity");
  const std::string kind = serialized.substr(0, colon);
  if (kind == "char") {
    tok.granularity_ = Granularity::kCharacter;
  } else if (kind == "word") {
    tok.granularity_ = Granularity::kWord;
  } else {
    throw Error(ErrorKind::kFormat, "unknown tokenizer granularity '" + kind + "'");
  }
  std::string rest = serialized.substr(colon + 1);
  size_t start = 0;
  while (start < rest.size()) {
    size_t comma = rest.find(',', start);
    if (comma == std::string::npos) comma = rest.size();
    const std::string sym = HexDecode(rest.substr(start, comma - start));
    tok.ids_[sym] = static_cast<int>(tok.symbols_.size()) + 1;
    tok.symbols_.push_back(sym);
    start = comma + 1;
  }
  return tok;
}

}  // namespace l2s
