// k-means codebooks that turn continuous feature frames into discrete units.

#ifndef L2S_QUANTIZER_H_
#define L2S_QUANTIZER_H_

#include <cstdint>
#include <vector>

#include "l2s/featureio.h"

namespace l2s {

struct FitMetadata {
  int iterations_run = 0;
  double inertia = 0.0;       // after the last Lloyd step
  double init_inertia = 0.0;  // of the k-means++ seeding
  std::vector<double> inertia_history;
  uint64_t seed = 0;
};

struct Codebook {
  FeatureMatrix centroids;  // K x D
  FeatureKind kind = FeatureKind::kSpeech;
  FitMetadata fit;

  int size() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
  void Validate() const;
};

struct KMeansOptions {
  int k = 100;
  uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-4;  // on the largest centroid L2 movement
};

// Lloyd iterations from k-means++ seeding. Empty clusters are re-seeded with
// the point farthest from its current centroid. Points are rows.
Codebook FitKMeans(const FeatureMatrix& points, const KMeansOptions& options, FeatureKind kind);

// Stacks the frames of several sequences into one point matrix.
FeatureMatrix StackFrames(const std::vector<FeatureSequence>& seqs);

// Nearest centroid per frame by exact squared L2; ties go to the lower index.
UnitSequence Assign(const Codebook& codebook, const FeatureSequence& seq);
int32_t NearestCentroid(const Codebook& codebook, const float* frame);

// Version-2 feature container with the kind code in the header extension.
void SaveCodebook(const Codebook& codebook, const fs::path& path);
Codebook LoadCodebook(const fs::path& path);

}  // namespace l2s

#endif  // L2S_QUANTIZER_H_
