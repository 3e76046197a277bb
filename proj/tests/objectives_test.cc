#include "doctest.h"

#include <cmath>

#include "l2s/objectives.h"
#include "reference_impls.h"

using namespace l2s;

namespace {

Eigen::MatrixXd RandomLogits(Rng& rng, int rows, int cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 2.0 * rng.Normal();
  return m;
}

// Every token sequence of length <= 3 over 1..vocab.
std::vector<std::vector<int>> AllTargets(int vocab) {
  std::vector<std::vector<int>> out = {{}};
  for (size_t len = 1; len <= 3; ++len) {
    std::vector<int> seq(len, 1);
    while (true) {
      out.push_back(seq);
      size_t pos = 0;
      while (pos < len && ++seq[pos] > vocab) seq[pos++] = 1;
      if (pos == len) break;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("log-softmax rows normalize and survive huge logits") {
  Eigen::MatrixXd x(2, 3);
  x << 1000, 1001, 1002, -5, 0, 5;
  const Eigen::MatrixXd lp = LogSoftmaxRows(x);
  for (int r = 0; r < 2; ++r) CHECK(lp.row(r).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::isfinite(lp(0, 0)));
}

TEST_CASE("cross-entropy is the mean negative log-probability of the targets") {
  Eigen::MatrixXd logits(2, 3);
  logits << 0.2, -1.0, 0.5, 1.5, 0.0, -0.3;
  UnitSequence t{{2, 0}, 3};
  auto nll = [&](int r, int k) {
    const double z = std::log(logits.row(r).array().exp().sum());
    return z - logits(r, k);
  };
  const double expect = (nll(0, 2) + nll(1, 0)) / 2.0;
  CHECK(CrossEntropyUnits(logits, t) == doctest::Approx(expect).epsilon(1e-15));
  const LossAndGrad g = CrossEntropyUnitsWithGrad(logits, t);
  CHECK(g.loss == doctest::Approx(expect).epsilon(1e-15));
  // Softmax minus one-hot, over frames.
  const double p00 = std::exp(-nll(0, 0));
  CHECK(g.grad(0, 0) == doctest::Approx(p00 / 2.0));
  CHECK(g.grad(0, 2) == doctest::Approx((std::exp(-nll(0, 2)) - 1.0) / 2.0));
}

TEST_CASE("cross-entropy rejects mismatched lengths and ids") {
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(2, 3);
  CHECK_THROWS_AS(CrossEntropyUnits(logits, UnitSequence{{0}, 3}), Error);
  CHECK_THROWS_AS(CrossEntropyUnits(logits, UnitSequence{{0, 3}, 3}), Error);
}

TEST_CASE("L1 sums over dims and averages over frames") {
  Eigen::MatrixXd pred(2, 2);
  pred << 1, 2, 3, 4;
  FeatureSequence tgt;
  tgt.frames = FeatureMatrix(2, 2);
  tgt.frames << 0, 2, 5, 1;
  CHECK(L1Features(pred, tgt) == doctest::Approx((1 + 0 + 2 + 3) / 2.0));
  CHECK(L1Features(pred, tgt, {.average_over_dims = true}) == doctest::Approx(6.0 / 4.0));
  const LossAndGrad g = L1FeaturesWithGrad(pred, tgt);
  CHECK(g.grad(0, 0) == doctest::Approx(0.5));
  CHECK(g.grad(0, 1) == 0.0);  // |x| at 0
  CHECK(g.grad(1, 0) == doctest::Approx(-0.5));
}

TEST_CASE("L1 trims a longer target to the prediction") {
  Eigen::MatrixXd pred = Eigen::MatrixXd::Zero(2, 1);
  FeatureSequence tgt;
  tgt.frames = FeatureMatrix(3, 1);
  tgt.frames << 1, 1, 100;
  CHECK(L1Features(pred, tgt) == doctest::Approx(1.0));
}

TEST_CASE("CTC forward equals exhaustive alignment enumeration") {
  Rng rng(7);
  int checked = 0;
  for (int vocab = 1; vocab <= 3; ++vocab) {
    for (const auto& target : AllTargets(vocab)) {
      for (int frames = 1; frames <= 6; ++frames) {
        const Eigen::MatrixXd lp = LogSoftmaxRows(RandomLogits(rng, frames, vocab + 1));
        const double brute = ref::CtcByEnumeration(lp, target);
        if (frames < CtcMinFrames(target)) {
          CHECK(std::isinf(brute));
          CHECK_THROWS_AS(CtcLoss(lp, target), Error);
          continue;
        }
        const double fwd = CtcLoss(lp, target);
        // Both are -log P, so this is a log-space comparison.
        CHECK(std::abs(fwd - brute) <= 1e-9);
        ++checked;
      }
    }
  }
  CHECK(checked > 200);
}

TEST_CASE("CTC minimum frames counts repeated neighbours") {
  CHECK(CtcMinFrames({}) == 0);
  CHECK(CtcMinFrames({1, 2, 3}) == 3);
  CHECK(CtcMinFrames({1, 1}) == 3);
  CHECK(CtcMinFrames({2, 2, 2}) == 5);
}

TEST_CASE("CTC gradient matches central differences") {
  Rng rng(11);
  const std::vector<int> target = {1, 2, 2};
  Eigen::MatrixXd logits = RandomLogits(rng, 6, 3);
  const LossAndGrad g = CtcLossWithGrad(logits, target);
  CHECK(g.loss == doctest::Approx(CtcLoss(LogSoftmaxRows(logits), target)).epsilon(1e-13));
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    Eigen::MatrixXd a = logits, b = logits;
    a.data()[i] += h;
    b.data()[i] -= h;
    const double num = (CtcLoss(LogSoftmaxRows(a), target) - CtcLoss(LogSoftmaxRows(b), target)) / (2 * h);
    CHECK(g.grad.data()[i] == doctest::Approx(num).epsilon(1e-6));
  }
}

TEST_CASE("CTC rejects blank and out-of-range tokens") {
  const Eigen::MatrixXd lp = LogSoftmaxRows(Eigen::MatrixXd::Zero(4, 3));
  CHECK_THROWS_AS(CtcLoss(lp, {0}), Error);
  CHECK_THROWS_AS(CtcLoss(lp, {3}), Error);
  try {
    CtcLoss(lp, {1, 1, 1});
    FAIL("expected infeasible");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInfeasible);
  }
}

TEST_CASE("total loss is the weighted linear sum") {
  LossWeights w;
  CHECK(w.alpha_ctc == 0.001);
  CHECK(w.alpha_l1 == 1.0);
  // 0.5 * 1 + 2 * 0.001
  CHECK(TotalLoss(0.5, 2.0, w) == 0.5 + 0.001 * 2.0);
  CHECK(TotalLoss(0.5, 2.0, w) == doctest::Approx(0.502).epsilon(1e-15));
  CHECK(TotalLoss(3.0, 0.0, {.alpha_ctc = 0.25, .alpha_l1 = 2.0}) == 6.0);
  CHECK_THROWS_AS((LossWeights{.alpha_ctc = -1.0, .alpha_l1 = 1.0}.Validate()), Error);
}

TEST_CASE("tokenizer round trips characters and words") {
  const CtcTokenizer chars = CtcTokenizer::Build({"bin blue", "at"});
  const std::vector<int> ids = chars.Encode("bin at");
  for (int id : ids) CHECK(id >= 1);
  CHECK(chars.Decode(ids) == "bin at");
  const CtcTokenizer again = CtcTokenizer::Parse(chars.Serialize());
  CHECK(again.Encode("blue") == chars.Encode("blue"));

  const CtcTokenizer words = CtcTokenizer::Build({"bin blue at", "set red"}, CtcTokenizer::Granularity::kWord);
  CHECK(words.vocab_size() == 5);
  CHECK(words.Encode("set blue").size() == 2);
  CHECK_THROWS_AS(words.Encode("green"), Error);
}
