#include "pcda/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

namespace pcda {

namespace {

void require_finite(const PointCloud& cloud, const char* who) {
  if (!cloud.points.allFinite()) {
    throw ValidationError(std::string(who) + ": cloud has non-finite coordinates");
  }
}

void require_same_size(const PointCloud& a, const PointCloud& b, const char* who) {
  if (a.size() != b.size()) {
    throw ValidationError(std::string(who) + ": clouds have different point counts (" +
                          std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  if (a.size() == 0) {
    throw ValidationError(std::string(who) + ": empty cloud");
  }
}

Eigen::MatrixXd cost_matrix(const PointCloud& a, const PointCloud& b) {
  const int n = a.size();
  Eigen::MatrixXd c(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      c(i, j) = (a.points.row(i) - b.points.row(j)).norm();
    }
  }
  return c;
}

// Hungarian algorithm with potentials, O(n^3). Returns row -> column.
std::vector<int> solve_lap(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) {
    if (p[static_cast<std::size_t>(j)] > 0) {
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
  }
  return row_to_col;
}

// Forward auction for the assignment problem on benefit = -cost, with
// epsilon scaling. Persons bid in FIFO order, so the result is a pure
// function of the inputs.
std::vector<int> solve_auction(const Eigen::MatrixXd& cost, double eps_final) {
  const int n = static_cast<int>(cost.rows());
  std::vector<double> price(static_cast<std::size_t>(n), 0.0);
  const double spread = cost.maxCoeff() - cost.minCoeff();
  double eps = std::max(eps_final, spread / 4.0 + eps_final);

  std::vector<int> person_to_obj(static_cast<std::size_t>(n), -1);
  std::vector<int> obj_to_person(static_cast<std::size_t>(n), -1);

  for (;;) {
    std::fill(person_to_obj.begin(), person_to_obj.end(), -1);
    std::fill(obj_to_person.begin(), obj_to_person.end(), -1);
    std::deque<int> unassigned;
    for (int i = 0; i < n; ++i) unassigned.push_back(i);

    while (!unassigned.empty()) {
      const int i = unassigned.front();
      unassigned.pop_front();
      // Best and second-best net value over objects.
      int best_j = -1;
      double best_v = -std::numeric_limits<double>::infinity();
      double second_v = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        const double v = -cost(i, j) - price[static_cast<std::size_t>(j)];
        if (v > best_v) {
          second_v = best_v;
          best_v = v;
          best_j = j;
        } else if (v > second_v) {
          second_v = v;
        }
      }
      if (n == 1) second_v = best_v;
      const double bid = best_v - second_v + eps;
      price[static_cast<std::size_t>(best_j)] += bid;
      const int evicted = obj_to_person[static_cast<std::size_t>(best_j)];
      if (evicted >= 0) {
        person_to_obj[static_cast<std::size_t>(evicted)] = -1;
        unassigned.push_back(evicted);
      }
      obj_to_person[static_cast<std::size_t>(best_j)] = i;
      person_to_obj[static_cast<std::size_t>(i)] = best_j;
    }

    if (eps <= eps_final) break;
    eps = std::max(eps_final, eps / 5.0);
  }
  return person_to_obj;
}

}  // namespace

PointCloud normalize_cloud(const PointCloud& cloud) {
  if (cloud.size() < 1) throw ValidationError("normalize_cloud: empty cloud");
  require_finite(cloud, "normalize_cloud");
  PointCloud out = cloud;
  const Eigen::RowVector3d centroid = out.points.colwise().mean();
  out.points.rowwise() -= centroid;
  const double max_norm = out.points.rowwise().norm().maxCoeff();
  if (max_norm > 0.0) out.points /= max_norm;
  return out;
}

PointCloud resample_cloud(const PointCloud& cloud, int n, u64 seed) {
  if (n <= 0) throw ValidationError("resample_cloud: n must be positive");
  const int m = cloud.size();
  if (m < 1) throw ValidationError("resample_cloud: empty cloud");

  PointCloud out;
  out.label = cloud.label;
  out.domain = cloud.domain;
  out.points.resize(n, 3);
  Rng rng(seed);

  if (m >= n) {
    // Farthest-point sampling from a seeded start; ties resolved by lowest
    // index.
    std::vector<int> selected;
    selected.reserve(static_cast<std::size_t>(n));
    std::vector<double> best_d2(static_cast<std::size_t>(m),
                                std::numeric_limits<double>::infinity());
    int cur = static_cast<int>(rng.below(static_cast<u64>(m)));
    selected.push_back(cur);
    for (int k = 1; k < n; ++k) {
      int arg = -1;
      double best = -1.0;
      for (int i = 0; i < m; ++i) {
        const double d2 = (cloud.points.row(i) - cloud.points.row(cur)).squaredNorm();
        if (d2 < best_d2[static_cast<std::size_t>(i)]) best_d2[static_cast<std::size_t>(i)] = d2;
        if (best_d2[static_cast<std::size_t>(i)] > best) {
          best = best_d2[static_cast<std::size_t>(i)];
          arg = i;
        }
      }
      cur = arg;
      selected.push_back(cur);
    }
    for (int k = 0; k < n; ++k) {
      out.points.row(k) = cloud.points.row(selected[static_cast<std::size_t>(k)]);
    }
  } else {
    // Keep every original point, pad by resampling with replacement.
    for (int k = 0; k < m; ++k) out.points.row(k) = cloud.points.row(k);
    for (int k = m; k < n; ++k) {
      out.points.row(k) = cloud.points.row(static_cast<int>(rng.below(static_cast<u64>(m))));
    }
  }
  return out;
}

double assignment_cost(const PointCloud& a, const PointCloud& b,
                       const std::vector<int>& mapping) {
  require_same_size(a, b, "assignment_cost");
  if (static_cast<int>(mapping.size()) != a.size()) {
    throw ValidationError("assignment_cost: mapping size mismatch");
  }
  double total = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    total += (a.points.row(i) - b.points.row(mapping[static_cast<std::size_t>(i)])).norm();
  }
  return total / static_cast<double>(a.size());
}

Assignment emd_exact(const PointCloud& a, const PointCloud& b) {
  require_same_size(a, b, "emd_exact");
  Assignment out;
  out.mapping = solve_lap(cost_matrix(a, b));
  out.cost = assignment_cost(a, b, out.mapping);
  return out;
}

Assignment emd_approx(const PointCloud& a, const PointCloud& b, double epsilon) {
  require_same_size(a, b, "emd_approx");
  if (!(epsilon > 0.0)) throw ValidationError("emd_approx: epsilon must be positive");
  // Auction epsilon-CS bounds the total cost by opt + n*eps, i.e. the mean
  // cost by opt_mean + epsilon.
  Assignment out;
  out.mapping = solve_auction(cost_matrix(a, b), epsilon);
  out.cost = assignment_cost(a, b, out.mapping);
  return out;
}

Assignment emd_oracle(const PointCloud& a, const PointCloud& b) {
  require_same_size(a, b, "emd_oracle");
  const int n = a.size();
  if (n > 8) throw ValidationError("emd_oracle: refusing N > 8");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  const Eigen::MatrixXd c = cost_matrix(a, b);
  std::vector<int> best = perm;
  double best_total = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += c(i, perm[static_cast<std::size_t>(i)]);
    if (total < best_total) {
      best_total = total;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  Assignment out;
  out.mapping = best;
  out.cost = best_total / static_cast<double>(n);
  return out;
}

Points emd_gradient(const PointCloud& a, const PointCloud& b,
                    const Assignment& assignment) {
  require_same_size(a, b, "emd_gradient");
  if (static_cast<int>(assignment.mapping.size()) != a.size()) {
    throw ValidationError("emd_gradient: assignment does not match clouds");
  }
  const int n = a.size();
  Points g(n, 3);
  for (int i = 0; i < n; ++i) {
    const Eigen::RowVector3d d =
        a.points.row(i) - b.points.row(assignment.mapping[static_cast<std::size_t>(i)]);
    const double norm = d.norm();
    if (norm > 0.0) {
      g.row(i) = d / (static_cast<double>(n) * norm);
    } else {
      g.row(i).setZero();
    }
  }
  return g;
}

}  // namespace pcda
