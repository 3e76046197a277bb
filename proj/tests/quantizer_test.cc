#include "doctest.h"

#include <filesystem>

#include "l2s/quantizer.h"
#include "reference_impls.h"
#include "test_util.h"

using namespace l2s;

namespace {

FeatureMatrix RandomPoints(Rng& rng, int n, int d) {
  FeatureMatrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.Normal());
  return m;
}

// Two tight 1-D groups; float-exact values so both sides see the same data.
std::vector<double> SeparableLine() {
  return {0.0, 0.25, 0.5, 0.75, 1.0, 0.125, 6.0, 6.5, 7.0, 6.25, 5.75, 6.75};
}

}  // namespace

TEST_CASE("assign equals a brute-force argmin on random frames") {
  Rng rng(5);
  Codebook cb;
  cb.centroids = RandomPoints(rng, 37, 16);
  FeatureSequence seq;
  seq.frames = RandomPoints(rng, 1000, 16);
  const UnitSequence u = Assign(cb, seq);
  REQUIRE(u.size() == 1000);
  CHECK(u.codebook_size == 37);
  const Eigen::MatrixXd c = cb.centroids.cast<double>();
  for (int i = 0; i < 1000; ++i) {
    CHECK(u.ids[i] == ref::ArgminRow(c, seq.frames.row(i).cast<double>()));
  }
}

TEST_CASE("assign breaks ties toward the lower index") {
  Codebook cb;
  cb.centroids = FeatureMatrix(2, 1);
  cb.centroids << -1.0f, 1.0f;
  FeatureSequence seq;
  seq.frames = FeatureMatrix::Zero(1, 1);
  CHECK(Assign(cb, seq).ids[0] == 0);
}

TEST_CASE("k-means recovers the optimal two-partition on a separable line") {
  const std::vector<double> xs = SeparableLine();
  FeatureMatrix pts(static_cast<Eigen::Index>(xs.size()), 1);
  for (size_t i = 0; i < xs.size(); ++i) pts(static_cast<Eigen::Index>(i), 0) = static_cast<float>(xs[i]);
  const double best = ref::BestTwoPartitionSse(xs);
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const Codebook cb = FitKMeans(pts, {.k = 2, .seed = seed}, FeatureKind::kLip);
    CHECK(cb.fit.inertia == doctest::Approx(best).epsilon(1e-6));
    const double lo = std::min(cb.centroids(0, 0), cb.centroids(1, 0));
    const double hi = std::max(cb.centroids(0, 0), cb.centroids(1, 0));
    CHECK(lo == doctest::Approx(0.4375));
    CHECK(hi == doctest::Approx(6.375));
  }
}

TEST_CASE("k-means inertia never increases and the fit is seed-deterministic") {
  Rng rng(8);
  const FeatureMatrix pts = RandomPoints(rng, 400, 8);
  const Codebook a = FitKMeans(pts, {.k = 12, .seed = 3, .max_iters = 50}, FeatureKind::kSpeech);
  const Codebook b = FitKMeans(pts, {.k = 12, .seed = 3, .max_iters = 50}, FeatureKind::kSpeech);
  CHECK(a.centroids == b.centroids);
  for (size_t i = 1; i < a.fit.inertia_history.size(); ++i) {
    CHECK(a.fit.inertia_history[i] <= a.fit.inertia_history[i - 1] + 1e-9);
  }
  CHECK(a.fit.inertia <= a.fit.init_inertia);
}

TEST_CASE("k-means error paths") {
  FeatureMatrix pts = FeatureMatrix::Zero(5, 2);
  CHECK_THROWS_AS(FitKMeans(pts, {.k = 6}, FeatureKind::kLip), Error);
  CHECK_THROWS_AS(FitKMeans(pts, {.k = 2}, FeatureKind::kLip), Error);  // one distinct vector
  CHECK_THROWS_AS(FitKMeans(pts, {.k = 0}, FeatureKind::kLip), Error);
  pts(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(FitKMeans(pts, {.k = 1}, FeatureKind::kLip), Error);
}

TEST_CASE("codebook save and load round trip bit-exactly") {
  TempDir dir;
  Rng rng(2);
  Codebook cb = FitKMeans(RandomPoints(rng, 50, 4), {.k = 5, .seed = 1}, FeatureKind::kLip);
  SaveCodebook(cb, dir.path() / "cb.l2sf");
  const Codebook back = LoadCodebook(dir.path() / "cb.l2sf");
  CHECK(back.centroids == cb.centroids);
  CHECK(back.kind == FeatureKind::kLip);
  // A plain version-1 feature file is not a codebook.
  FeatureSequence seq;
  seq.frames = cb.centroids;
  WriteFeatures(seq, dir.path() / "plain.l2sf");
  CHECK_THROWS_AS(LoadCodebook(dir.path() / "plain.l2sf"), Error);
}
