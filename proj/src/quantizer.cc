#include "l2s/quantizer.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <string>

#include "l2s/common.h"

namespace l2s {

void Codebook::Validate() const {
  if (centroids.rows() < 1 || centroids.cols() < 1) {
    throw Error(ErrorKind::kValidation, "codebook must have K >= 1 and D >= 1");
  }
  if (!centroids.allFinite()) throw Error(ErrorKind::kValidation, "codebook has non-finite values");
  std::set<std::string> rows;
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const char* p = reinterpret_cast<const char*>(centroids.row(k).data());
    if (!rows.emplace(p, p + centroids.cols() * sizeof(float)).second) {
      throw Error(ErrorKind::kValidation, "codebook centroid " + std::to_string(k) + " is a duplicate");
    }
  }
}

FeatureMatrix StackFrames(const std::vector<FeatureSequence>& seqs) {
  Eigen::Index rows = 0;
  for (const auto& s : seqs) rows += s.frames.rows();
  if (seqs.empty()) return {};
  FeatureMatrix out(rows, seqs.front().frames.cols());
  Eigen::Index r = 0;
  for (const auto& s : seqs) {
    if (s.frames.cols() != out.cols()) throw Error(ErrorKind::kShape, "frame dims differ");
    out.middleRows(r, s.frames.rows()) = s.frames;
    r += s.frames.rows();
  }
  return out;
}

namespace {

using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double SquaredDistance(const RowMatrixD& a, Eigen::Index i, const RowMatrixD& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Nearest centroid for every point. Candidates come from the expanded form
// |x|^2 - 2 x.c + |c|^2; the reported distance is recomputed exactly.
void AssignAll(const RowMatrixD& x, const Eigen::VectorXd& x_norms, const RowMatrixD& c,
               std::vector<int>& labels, Eigen::VectorXd& dist) {
  const Eigen::VectorXd c_norms = c.rowwise().squaredNorm();
  const Eigen::Index n = x.rows();
  const Eigen::Index k = c.rows();
  constexpr Eigen::Index kBlock = 512;
  Eigen::MatrixXd cross;
  for (Eigen::Index start = 0; start < n; start += kBlock) {
    const Eigen::Index len = std::min(kBlock, n - start);
    cross.noalias() = x.middleRows(start, len) * c.transpose();
    for (Eigen::Index i = 0; i < len; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < k; ++j) {
        const double d = x_norms(start + i) - 2.0 * cross(i, j) + c_norms(j);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(j);
        }
      }
      labels[start + i] = best;
      dist(start + i) = SquaredDistance(x, start + i, c, best);
    }
  }
}

}  // namespace

Codebook FitKMeans(const FeatureMatrix& points, const KMeansOptions& options, FeatureKind kind) {
  const Eigen::Index n = points.rows();
  const int k = options.k;
  if (k < 1) throw Error(ErrorKind::kConfig, "k must be >= 1");
  if (options.max_iters < 0 || !(options.tol >= 0)) {
    throw Error(ErrorKind::kConfig, "max_iters and tol must be nonnegative");
  }
  if (n < k) {
    throw Error(ErrorKind::kCapacity, "k-means needs at least k=" + std::to_string(k) +
                                          " vectors, got " + std::to_string(n));
  }
  if (!points.allFinite()) throw Error(ErrorKind::kValidation, "k-means input contains NaN/Inf");

  const RowMatrixD x = points.cast<double>();
  const Eigen::VectorXd x_norms = x.rowwise().squaredNorm();
  Rng rng(MixSeed(options.seed, 0x6b6d));

  // k-means++ seeding.
  RowMatrixD c(k, x.cols());
  Eigen::VectorXd nearest(n);
  Eigen::Index first = static_cast<Eigen::Index>(rng.Below(static_cast<uint64_t>(n)));
  c.row(0) = x.row(first);
  for (Eigen::Index i = 0; i < n; ++i) nearest(i) = SquaredDistance(x, i, c, 0);
  for (int j = 1; j < k; ++j) {
    const double total = nearest.sum();
    if (!(total > 0.0)) {
      throw Error(ErrorKind::kCapacity, "fewer than k=" + std::to_string(k) + " distinct vectors");
    }
    const double target = rng.Uniform() * total;
    double acc = 0.0;
    Eigen::Index pick = -1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (nearest(i) <= 0.0) continue;
      acc += nearest(i);
      pick = i;
      if (acc > target) break;
    }
    c.row(j) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      nearest(i) = std::min(nearest(i), SquaredDistance(x, i, c, j));
    }
  }

  std::vector<int> labels(n);
  Eigen::VectorXd dist(n);
  FitMetadata meta;
  meta.seed = options.seed;

  for (int iter = 0; iter < options.max_iters; ++iter) {
    AssignAll(x, x_norms, c, labels, dist);
    const double inertia = dist.sum();
    if (iter == 0) meta.init_inertia = inertia;
    meta.inertia_history.push_back(inertia);

    RowMatrixD next = RowMatrixD::Zero(k, x.cols());
    std::vector<Eigen::Index> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(labels[i]) += x.row(i);
      ++counts[labels[i]];
    }
    std::vector<int> empty;
    for (int j = 0; j < k; ++j) {
      if (counts[j] > 0) {
        next.row(j) /= static_cast<double>(counts[j]);
      } else {
        empty.push_back(j);
      }
    }
    if (!empty.empty()) {
      // Farthest points first; ties by index so the choice is deterministic.
      std::vector<Eigen::Index> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return dist(a) > dist(b); });
      size_t cursor = 0;
      for (int j : empty) {
        next.row(j) = x.row(order[cursor]);
        dist(order[cursor]) = 0.0;
        ++cursor;
      }
    }

    double movement = 0.0;
    for (int j = 0; j < k; ++j) movement = std::max(movement, (next.row(j) - c.row(j)).norm());
    c = std::move(next);
    meta.iterations_run = iter + 1;
    if (movement < options.tol && empty.empty()) break;
  }

  AssignAll(x, x_norms, c, labels, dist);
  meta.inertia = dist.sum();
  if (meta.inertia_history.empty()) meta.init_inertia = meta.inertia;
  meta.inertia_history.push_back(meta.inertia);

  Codebook cb;
  cb.centroids = c.cast<float>();
  cb.kind = kind;
  cb.fit = std::move(meta);
  return cb;
}

int32_t NearestCentroid(const Codebook& codebook, const float* frame) {
  const Eigen::Index d = codebook.centroids.cols();
  int32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < codebook.centroids.rows(); ++j) {
    const float* c = codebook.centroids.row(j).data();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) {
      const double diff = static_cast<double>(frame[i]) - static_cast<double>(c[i]);
      acc += diff * diff;
    }
    if (acc < best_d) {
      best_d = acc;
      best = static_cast<int32_t>(j);
    }
  }
  return best;
}

UnitSequence Assign(const Codebook& codebook, const FeatureSequence& seq) {
  if (seq.dim() != codebook.dim()) {
    throw Error(ErrorKind::kShape, "sequence dim " + std::to_string(seq.dim()) +
                                       " != codebook dim " + std::to_string(codebook.dim()));
  }
  UnitSequence out;
  out.codebook_size = codebook.size();
  out.frame_rate_hz = seq.frame_rate_hz;
  out.ids.resize(seq.num_frames());
  for (int t = 0; t < seq.num_frames(); ++t) {
    out.ids[t] = NearestCentroid(codebook, seq.frames.row(t).data());
  }
  return out;
}

void SaveCodebook(const Codebook& codebook, const fs::path& path) {
  codebook.Validate();
  ContainerHeader h;
  h.version = 2;
  h.frame_rate_hz = codebook.kind == FeatureKind::kLip ? kLipFrameRateHz : kSpeechFrameRateHz;
  h.kind_code = static_cast<uint32_t>(codebook.kind);
  WriteContainer(path, h, codebook.centroids);
}

Codebook LoadCodebook(const fs::path& path) {
  Container c = ReadContainer(path);
  if (c.header.version != 2 || !c.header.kind_code) {
    throw Error(ErrorKind::kFormat, "codebook file must be container version 2 at byte 4");
  }
  const uint32_t code = *c.header.kind_code;
  if (code != static_cast<uint32_t>(FeatureKind::kLip) &&
      code != static_cast<uint32_t>(FeatureKind::kSpeech)) {
    throw Error(ErrorKind::kValidation, "unknown codebook kind code " + std::to_string(code));
  }
  Codebook cb;
  cb.centroids = std::move(c.payload);
  cb.kind = static_cast<FeatureKind>(code);
  cb.Validate();
  return cb;
}

}  // namespace l2s
