#include <doctest.h>

#include <functional>

#include "pcda/common.hpp"
#include "pcda/tape.hpp"

using namespace pcda;
using Mat = ad::Mat<double>;

namespace {

Mat random_matrix(Eigen::Index r, Eigen::Index c, u64 seed, double scale = 1.0) {
  Rng rng(seed);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-scale, scale);
  }
  return m;
}

// Central finite differences of scalar_fn with respect to every entry of
// every leaf, compared against tape gradients.
void check_gradients(std::vector<Mat> leaves,
                     const std::function<ad::Tensor(ad::Tape<double>&, const std::vector<ad::Tensor>&)>& build,
                     double tol = 1e-7) {
  ad::Tape<double> tape;
  std::vector<ad::Tensor> handles;
  for (Mat& m : leaves) handles.push_back(tape.leaf(&m, true));
  ad::Tensor root = build(tape, handles);
  tape.backward(root);
  std::vector<Mat> analytic;
  for (ad::Tensor h : handles) analytic.push_back(tape.grad(h));

  const double h = 1e-6;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (Eigen::Index i = 0; i < leaves[li].rows(); ++i) {
      for (Eigen::Index j = 0; j < leaves[li].cols(); ++j) {
        const double orig = leaves[li](i, j);
        auto eval = [&](double v) {
          leaves[li](i, j) = v;
          ad::Tape<double> t2;
          std::vector<ad::Tensor> hs;
          for (Mat& m : leaves) hs.push_back(t2.leaf(&m, false));
          return t2.scalar(build(t2, hs));
        };
        const double fp = eval(orig + h);
        const double fm = eval(orig - h);
        leaves[li](i, j) = orig;
        const double fd = (fp - fm) / (2 * h);
        const double got = analytic[li](i, j);
        CHECK(std::abs(got - fd) <= tol * std::max({1.0, std::abs(fd), std::abs(got)}));
      }
    }
  }
}

}  // namespace

TEST_CASE("matmul + bias + relu chain gradients") {
  check_gradients(
      {random_matrix(3, 4, 1), random_matrix(4, 2, 2), random_matrix(1, 2, 3)},
      [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
        return t.sum(t.square(t.relu(t.add_rowvec(t.matmul(h[0], h[1]), h[2]))));
      });
}

TEST_CASE("softmax rows gradient") {
  check_gradients({random_matrix(4, 5, 7, 2.0), random_matrix(4, 5, 8)},
                  [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
                    return t.sum(t.hadamard(t.softmax_rows(h[0]), h[1]));
                  });
}

TEST_CASE("log softmax + nll gradient") {
  check_gradients({random_matrix(1, 6, 9, 2.0)},
                  [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
                    return t.nll_index(t.log_softmax_rows(h[0]), 2);
                  });
}

TEST_CASE("column max pool gradient") {
  check_gradients({random_matrix(6, 3, 11)},
                  [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
                    return t.sum(t.square(t.colmax(h[0])));
                  });
}

TEST_CASE("per-column normalization gradient") {
  check_gradients(
      {random_matrix(7, 3, 13), random_matrix(1, 3, 14), random_matrix(1, 3, 15)},
      [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
        return t.sum(t.square(t.normalize_cols(h[0], h[1], h[2], 1e-5)));
      },
      1e-6);
}

TEST_CASE("concat, slice, transpose, scale, hadamard gradients") {
  check_gradients(
      {random_matrix(3, 2, 17), random_matrix(3, 2, 18)},
      [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
        ad::Tensor cat = t.concat_cols({h[0], h[1]});
        ad::Tensor left = t.slice_cols(cat, 0, 2);
        ad::Tensor right = t.slice_cols(cat, 2, 2);
        ad::Tensor prod = t.hadamard(left, right);
        return t.sum(t.scale(t.matmul(t.transpose(prod), cat), 0.5));
      });
}

TEST_CASE("exp, abs, square, mean gradients") {
  check_gradients({random_matrix(3, 3, 19)},
                  [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
                    ad::Tensor e = t.exp(t.scale(h[0], 0.5));
                    ad::Tensor a = t.abs(t.add_scalar(h[0], -0.1));
                    return t.add(t.mean_all(e), t.sum(t.square(a)));
                  });
}

TEST_CASE("permute and reshape gradients") {
  check_gradients({random_matrix(4, 3, 23)},
                  [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
                    ad::Tensor p = t.permute_rows(h[0], {2, 0, 3, 1});
                    ad::Tensor r = t.reshape_rowmajor(p, 3, 4);
                    return t.sum(t.square(r));
                  });
}

TEST_CASE("external scalar injects its stored gradient") {
  Mat x = random_matrix(2, 3, 29);
  Mat g = random_matrix(2, 3, 31);
  ad::Tape<double> t;
  ad::Tensor xt = t.leaf(&x, true);
  ad::Tensor ext = t.external_scalar(1.5, xt, g);
  ad::Tensor root = t.scale(ext, 2.0);
  t.backward(root);
  CHECK(t.scalar(ext) == doctest::Approx(1.5));
  CHECK((t.grad(xt) - 2.0 * g).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("no gradients flow into frozen leaves") {
  Mat w = random_matrix(3, 3, 37);
  Mat x = random_matrix(2, 3, 38);
  ad::Tape<double> t;
  ad::Tensor wt = t.leaf(&w, false);
  ad::Tensor xt = t.leaf(&x, true);
  ad::Tensor root = t.sum(t.square(t.matmul(xt, wt)));
  t.backward(root);
  CHECK(t.grad(wt).cwiseAbs().maxCoeff() == 0.0);
  CHECK(t.grad(xt).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("sub and add broadcast combinations") {
  check_gradients({random_matrix(3, 4, 41), random_matrix(3, 4, 42)},
                  [](ad::Tape<double>& t, const std::vector<ad::Tensor>& h) {
                    return t.sum(t.square(t.sub(h[0], t.scale(h[1], 0.7))));
                  });
}
