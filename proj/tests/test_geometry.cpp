#include <doctest.h>

#include <cmath>

#include "pcda/geometry.hpp"

using namespace pcda;

namespace {

PointCloud random_cloud(int n, u64 seed, double scale = 1.0) {
  Rng rng(seed);
  PointCloud c;
  c.points.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) c.points(i, j) = rng.uniform(-scale, scale);
  }
  return c;
}

PointCloud single(double x, double y, double z) {
  PointCloud c;
  c.points.resize(1, 3);
  c.points << x, y, z;
  return c;
}

}  // namespace

TEST_CASE("normalize: centered unit cloud is a fixed point") {
  PointCloud c;
  c.points.resize(2, 3);
  c.points << 1, 0, 0, -1, 0, 0;
  const PointCloud out = normalize_cloud(c);
  CHECK(out.points.isApprox(c.points, 1e-12));
}

TEST_CASE("normalize: single point collapses to origin") {
  const PointCloud out = normalize_cloud(single(5, 5, 5));
  CHECK(out.points.norm() == doctest::Approx(0.0));
}

TEST_CASE("normalize: centroid zero and max norm one on random clouds") {
  for (u64 seed = 0; seed < 8; ++seed) {
    const PointCloud out = normalize_cloud(random_cloud(4, seed, 3.0));
    // Direct recomputation of centroid and max norm.
    CHECK(out.points.colwise().mean().norm() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(out.points.rowwise().norm().maxCoeff() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("normalize: degenerate cloud keeps scale 1") {
  PointCloud c;
  c.points.resize(3, 3);
  c.points << 2, 2, 2, 2, 2, 2, 2, 2, 2;
  const PointCloud out = normalize_cloud(c);
  CHECK(out.points.cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("resample: N == n returns a permutation") {
  const PointCloud c = random_cloud(16, 3);
  const PointCloud out = resample_cloud(c, 16, 99);
  REQUIRE(out.size() == 16);
  // every original point appears exactly once
  std::vector<bool> used(16, false);
  for (int i = 0; i < 16; ++i) {
    bool found = false;
    for (int j = 0; j < 16; ++j) {
      if (!used[j] && (out.points.row(i) - c.points.row(j)).norm() == 0.0) {
        used[j] = true;
        found = true;
        break;
      }
    }
    CHECK(found);
  }
}

TEST_CASE("resample: padding a single point") {
  const PointCloud out = resample_cloud(single(1, 2, 3), 4, 7);
  REQUIRE(out.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(out.points(i, 0) == doctest::Approx(1));
    CHECK(out.points(i, 1) == doctest::Approx(2));
    CHECK(out.points(i, 2) == doctest::Approx(3));
  }
}

TEST_CASE("resample: FPS on a cube picks antipodal corners for every start") {
  PointCloud cube;
  cube.points.resize(8, 3);
  int r = 0;
  for (int x : {-1, 1}) {
    for (int y : {-1, 1}) {
      for (int z : {-1, 1}) {
        cube.points.row(r++) << x, y, z;
      }
    }
  }
  const double diagonal = 2.0 * std::sqrt(3.0);
  for (u64 seed = 0; seed < 16; ++seed) {
    const PointCloud out = resample_cloud(cube, 2, seed);
    const double d = (out.points.row(0) - out.points.row(1)).norm();
    CHECK(d == doctest::Approx(diagonal).epsilon(1e-12));
  }
}

TEST_CASE("resample: n = 0 is invalid") {
  CHECK_THROWS_AS(resample_cloud(single(0, 0, 0), 0, 1), ValidationError);
}

TEST_CASE("resample: deterministic in (cloud, n, seed)") {
  const PointCloud c = random_cloud(64, 11);
  const PointCloud a = resample_cloud(c, 17, 5);
  const PointCloud b = resample_cloud(c, 17, 5);
  CHECK((a.points - b.points).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("emd_exact: identity and forced pair") {
  const PointCloud c = random_cloud(10, 21);
  CHECK(emd_exact(c, c).cost == doctest::Approx(0.0));

  const Assignment one = emd_exact(single(0, 0, 0), single(1, 0, 0));
  CHECK(one.cost == doctest::Approx(1.0));
  CHECK(one.mapping == std::vector<int>{0});
}

TEST_CASE("emd_exact: size mismatch is invalid") {
  CHECK_THROWS_AS(emd_exact(random_cloud(3, 1), random_cloud(4, 2)), ValidationError);
}

TEST_CASE("emd_exact matches full enumeration on 6-point clouds") {
  for (u64 seed = 0; seed < 10; ++seed) {
    const PointCloud a = random_cloud(6, 100 + seed);
    const PointCloud b = random_cloud(6, 200 + seed);
    const Assignment exact = emd_exact(a, b);
    const Assignment oracle = emd_oracle(a, b);
    CHECK(exact.cost == doctest::Approx(oracle.cost).epsilon(1e-9));
  }
}

TEST_CASE("emd_oracle: N = 1, colinear N = 2, refusal, cross-check") {
  const Assignment unique = emd_oracle(single(0, 0, 0), single(3, 4, 0));
  CHECK(unique.cost == doctest::Approx(5.0));

  PointCloud a, b;
  a.points.resize(2, 3);
  a.points << 0, 0, 0, 2, 0, 0;
  b.points.resize(2, 3);
  b.points << 1, 0, 0, 3, 0, 0;
  const Assignment col = emd_oracle(a, b);
  // identity mapping costs (1 + 1)/2 = 1, the swap (3 + 1)/2 = 2
  CHECK(col.cost == doctest::Approx(1.0));
  CHECK(col.mapping == std::vector<int>{0, 1});

  CHECK_THROWS_AS(emd_oracle(random_cloud(9, 5), random_cloud(9, 6)), ValidationError);

  const PointCloud x = random_cloud(5, 77);
  const PointCloud y = random_cloud(5, 88);
  CHECK(emd_oracle(x, y).cost == doctest::Approx(emd_exact(x, y).cost).epsilon(1e-9));
}

TEST_CASE("emd_approx: identity, accuracy at 64 points, permutation validity") {
  const PointCloud c = random_cloud(32, 4);
  CHECK(emd_approx(c, c, 1e-3).cost == doctest::Approx(0.0).epsilon(1e-9));

  for (u64 seed = 0; seed < 5; ++seed) {
    const PointCloud a = random_cloud(64, 300 + seed);
    const PointCloud b = random_cloud(64, 400 + seed);
    const double exact = emd_exact(a, b).cost;
    const double approx = emd_approx(a, b, 1e-3).cost;
    CHECK(approx >= exact - 1e-12);
    CHECK(approx <= exact * 1.01);
  }

  // Huge epsilon still yields a bijection.
  const PointCloud a = random_cloud(20, 9);
  const PointCloud b = random_cloud(20, 10);
  const Assignment loose = emd_approx(a, b, 10.0);
  std::vector<bool> seen(20, false);
  for (int j : loose.mapping) {
    REQUIRE(j >= 0);
    REQUIRE(j < 20);
    CHECK(!seen[static_cast<std::size_t>(j)]);
    seen[static_cast<std::size_t>(j)] = true;
  }
}

TEST_CASE("emd_approx: epsilon must be positive") {
  const PointCloud a = random_cloud(4, 1);
  CHECK_THROWS_AS(emd_approx(a, a, 0.0), ValidationError);
}

TEST_CASE("emd symmetry and translation invariants") {
  for (u64 seed = 0; seed < 6; ++seed) {
    const PointCloud a = random_cloud(7, 500 + seed);
    const PointCloud b = random_cloud(7, 600 + seed);
    CHECK(emd_exact(a, b).cost == doctest::Approx(emd_exact(b, a).cost).epsilon(1e-9));
  }

  // Translating b changes single-point EMD by exactly ||t||.
  PointCloud a = single(0.3, -0.2, 0.9);
  PointCloud b = a;
  b.points.row(0) += Eigen::RowVector3d(0.3, -0.4, 1.2);
  CHECK(emd_exact(a, b).cost == doctest::Approx(Eigen::RowVector3d(0.3, -0.4, 1.2).norm()));
}

TEST_CASE("assignment cost recomputation matches within 1e-9") {
  const PointCloud a = random_cloud(12, 42);
  const PointCloud b = random_cloud(12, 43);
  const Assignment asg = emd_exact(a, b);
  CHECK(asg.cost == doctest::Approx(assignment_cost(a, b, asg.mapping)).epsilon(1e-12));
}

TEST_CASE("emd_gradient: conventions and finite differences") {
  const PointCloud c = random_cloud(6, 8);
  const Assignment self = emd_exact(c, c);
  CHECK(emd_gradient(c, c, self).cwiseAbs().maxCoeff() == doctest::Approx(0.0));

  const PointCloud a1 = single(1, 0, 0);
  const PointCloud b1 = single(0, 0, 0);
  const Points g1 = emd_gradient(a1, b1, emd_exact(a1, b1));
  CHECK(g1(0, 0) == doctest::Approx(1.0));
  CHECK(g1(0, 1) == doctest::Approx(0.0));
  CHECK(g1(0, 2) == doctest::Approx(0.0));

  // Central finite differences of the (re-solved) EMD cost.
  const double h = 1e-6;
  for (u64 seed = 0; seed < 50; ++seed) {
    PointCloud a = random_cloud(4, 900 + seed);
    const PointCloud b = random_cloud(4, 1900 + seed);
    const Assignment asg = emd_exact(a, b);
    const Points g = emd_gradient(a, b, asg);
    for (int i = 0; i < a.size(); ++i) {
      for (int d = 0; d < 3; ++d) {
        PointCloud ap = a, am = a;
        ap.points(i, d) += h;
        am.points(i, d) -= h;
        const double fd = (emd_exact(ap, b).cost - emd_exact(am, b).cost) / (2 * h);
        CHECK(std::abs(g(i, d) - fd) < 1e-5 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("oracle equivalence across sizes 2..7") {
  int pair_index = 0;
  for (int n = 2; n <= 7; ++n) {
    for (int rep = 0; rep < 4; ++rep) {
      const PointCloud a = random_cloud(n, 3000 + static_cast<u64>(pair_index));
      const PointCloud b = random_cloud(n, 4000 + static_cast<u64>(pair_index));
      ++pair_index;
      CHECK(emd_exact(a, b).cost == doctest::Approx(emd_oracle(a, b).cost).epsilon(1e-9));
    }
  }
}
