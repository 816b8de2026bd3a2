#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "pcda/common.hpp"

namespace pcda {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;

enum class DomainTag { source, target, synthetic };

/// One object: N unordered 3D points plus an optional class label.
struct PointCloud {
  Points points;
  std::optional<int> label;
  DomainTag domain = DomainTag::source;

  int size() const { return static_cast<int>(points.rows()); }
};

/// A bijection between two equal-size clouds together with its mean matched
/// Euclidean distance.
struct Assignment {
  std::vector<int> mapping;  // A[i] pairs with B[mapping[i]]
  double cost = 0.0;
};

/// Centers the cloud at its centroid and scales the farthest point to unit
/// norm. A degenerate cloud (all points identical) is centered but left at
/// scale 1.
PointCloud normalize_cloud(const PointCloud& cloud);

/// Resamples to exactly n points: farthest-point sampling when shrinking
/// (seeded start index), seeded resampling with replacement when padding.
PointCloud resample_cloud(const PointCloud& cloud, int n, u64 seed);

/// Mean matched Euclidean distance for a given mapping.
double assignment_cost(const PointCloud& a, const PointCloud& b,
                       const std::vector<int>& mapping);

/// Exact EMD via the Hungarian algorithm on the N x N Euclidean cost matrix.
Assignment emd_exact(const PointCloud& a, const PointCloud& b);

/// Auction algorithm with epsilon scaling. The returned cost is at most
/// `epsilon` above the exact mean cost and the result is deterministic in
/// (a, b, epsilon).
Assignment emd_approx(const PointCloud& a, const PointCloud& b, double epsilon);

/// Brute-force enumeration over all N! bijections. Refuses N > 8.
Assignment emd_oracle(const PointCloud& a, const PointCloud& b);

/// Gradient of assignment_cost with respect to a's coordinates, holding the
/// assignment fixed. Coincident pairs contribute a zero row.
Points emd_gradient(const PointCloud& a, const PointCloud& b,
                    const Assignment& assignment);

}  // namespace pcda
