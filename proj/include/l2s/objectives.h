// Training objectives: per-frame unit cross-entropy, feature L1, CTC, and
// their weighted sum. Each loss has a value-only form and a form that also
// returns the gradient with respect to its matrix input.

#ifndef L2S_OBJECTIVES_H_
#define L2S_OBJECTIVES_H_

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

#include "l2s/featureio.h"

namespace l2s {

struct LossWeights {
  double alpha_ctc = 0.001;
  double alpha_l1 = 1.0;

  void Validate() const;
};

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // same shape as the differentiated input
};

// Row-wise log-softmax, stable for large logits.
Eigen::MatrixXd LogSoftmaxRows(const Eigen::MatrixXd& logits);

// Mean over frames of -log softmax(logits)[t, target[t]].
double CrossEntropyUnits(const Eigen::MatrixXd& logits, const UnitSequence& targets);
LossAndGrad CrossEntropyUnitsWithGrad(const Eigen::MatrixXd& logits, const UnitSequence& targets);

struct L1Options {
  // false: per-frame absolute differences are summed over feature dims.
  bool average_over_dims = false;
};

// Target frames are trimmed (or padded with their last frame and masked out)
// to the prediction length; the average runs over unmasked frames only.
double L1Features(const Eigen::MatrixXd& pred, const FeatureSequence& target,
                  const L1Options& options = {});
// Subgradient of |x| at 0 is 0.
LossAndGrad L1FeaturesWithGrad(const Eigen::MatrixXd& pred, const FeatureSequence& target,
                               const L1Options& options = {});

inline constexpr int kCtcBlank = 0;

// Fewest frames that can emit `tokens`: one per token plus a blank between
// each pair of equal neighbours.
int CtcMinFrames(const std::vector<int>& tokens);

// -log P(tokens | frames) by the forward algorithm in log space. `log_probs`
// rows must be log-softmax normalized over {blank} + vocabulary.
double CtcLoss(const Eigen::MatrixXd& log_probs, const std::vector<int>& tokens);
// Same loss from raw logits, with the gradient w.r.t. the logits.
LossAndGrad CtcLossWithGrad(const Eigen::MatrixXd& logits, const std::vector<int>& tokens);

double TotalLoss(double l1, double ctc, const LossWeights& weights);

// Maps transcript symbols to CTC token ids 1..V; id 0 is the blank.
class CtcTokenizer {
 public:
  enum class Granularity { kCharacter, kWord };

  CtcTokenizer() = default;

  // Inventory is the sorted set of symbols seen in `transcripts`.
  static CtcTokenizer Build(const std::vector<std::string>& transcripts,
                            Granularity granularity = Granularity::kCharacter);
  // Rebuilds from the "|"-joined inventory written by Serialize().
  static CtcTokenizer Parse(const std::string& serialized);

  std::vector<int> Encode(const std::string& transcript) const;
  std::string Decode(const std::vector<int>& tokens) const;

  int vocab_size() const { return static_cast<int>(symbols_.size()); }
  Granularity granularity() const { return granularity_; }
  std::string Serialize() const;

 private:
  std::vector<std::string> Symbols(const std::string& transcript) const;

  Granularity granularity_ = Granularity::kCharacter;
  std::vector<std::string> symbols_;
  std::map<std::string, int> ids_;
};

}  // namespace l2s

#endif  // L2S_OBJECTIVES_H_
