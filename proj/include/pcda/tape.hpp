#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

namespace pcda::ad {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

/// Handle into a Tape. Valid only for the tape that produced it.
struct Tensor {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

/// Eager reverse-mode tape over dense matrices. Every op computes its value
/// immediately and records a closure that scatters the upstream gradient to
/// its inputs. Nodes whose inputs carry no gradient requirement are skipped
/// during the backward sweep, so frozen parameter blocks cost nothing extra.
template <typename S>
class Tape {
 public:
  using Matrix = Mat<S>;

  Tensor constant(Matrix v) { return push(std::move(v), false, nullptr); }

  /// Leaf bound to external storage; the tape never copies the data.
  Tensor leaf(const Matrix* v, bool requires_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.external = v;
    n.requires_grad = requires_grad;
    return Tensor{static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& value(Tensor t) const {
    const Node& n = node(t);
    return n.external != nullptr ? *n.external : n.val;
  }

  S scalar(Tensor t) const {
    const Matrix& v = value(t);
    assert(v.rows() == 1 && v.cols() == 1);
    return v(0, 0);
  }

  bool requires_grad(Tensor t) const { return node(t).requires_grad; }

  /// Gradient of the last backward() root with respect to t. Zero-sized if
  /// the node was never reached.
  Matrix grad(Tensor t) const {
    const Node& n = node(t);
    if (n.grad.size() == 0) {
      const Matrix& v = value(t);
      return Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  // ---- ops ----

  Tensor matmul(Tensor a, Tensor b) {
    Matrix v = value(a) * value(b);
    return push(std::move(v), needs(a, b), [this, a, b](const Matrix& g, Tensor) {
      if (node(a).requires_grad) accum(a, g * value(b).transpose());
      if (node(b).requires_grad) accum(b, value(a).transpose() * g);
    });
  }

  Tensor transpose(Tensor a) {
    Matrix v = value(a).transpose();
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor) {
      accum(a, g.transpose());
    });
  }

  Tensor add(Tensor a, Tensor b) {
    Matrix v = value(a) + value(b);
    return push(std::move(v), needs(a, b), [this, a, b](const Matrix& g, Tensor) {
      if (node(a).requires_grad) accum(a, g);
      if (node(b).requires_grad) accum(b, g);
    });
  }

  Tensor sub(Tensor a, Tensor b) {
    Matrix v = value(a) - value(b);
    return push(std::move(v), needs(a, b), [this, a, b](const Matrix& g, Tensor) {
      if (node(a).requires_grad) accum(a, g);
      if (node(b).requires_grad) accum(b, Matrix(-g));
    });
  }

  /// Broadcast-add a 1 x C row vector to every row of a.
  Tensor add_rowvec(Tensor a, Tensor r) {
    Matrix v = value(a);
    v.rowwise() += Eigen::RowVector<S, Eigen::Dynamic>(value(r).row(0));
    return push(std::move(v), needs(a, r), [this, a, r](const Matrix& g, Tensor) {
      if (node(a).requires_grad) accum(a, g);
      if (node(r).requires_grad) accum(r, Matrix(g.colwise().sum()));
    });
  }

  Tensor scale(Tensor a, S c) {
    Matrix v = value(a) * c;
    return push(std::move(v), needs(a), [this, a, c](const Matrix& g, Tensor) {
      accum(a, Matrix(g * c));
    });
  }

  Tensor add_scalar(Tensor a, S c) {
    Matrix v = value(a).array() + c;
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor) {
      accum(a, g);
    });
  }

  Tensor hadamard(Tensor a, Tensor b) {
    Matrix v = value(a).cwiseProduct(value(b));
    return push(std::move(v), needs(a, b), [this, a, b](const Matrix& g, Tensor) {
      if (node(a).requires_grad) accum(a, g.cwiseProduct(value(b)));
      if (node(b).requires_grad) accum(b, g.cwiseProduct(value(a)));
    });
  }

  Tensor relu(Tensor a) {
    Matrix v = value(a).cwiseMax(S(0));
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor self) {
      const Matrix& y = value(self);
      accum(a, (y.array() > S(0)).select(g, Matrix::Zero(g.rows(), g.cols())));
    });
  }

  Tensor square(Tensor a) {
    Matrix v = value(a).array().square();
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor) {
      accum(a, Matrix(S(2) * g.cwiseProduct(value(a))));
    });
  }

  Tensor abs(Tensor a) {
    Matrix v = value(a).cwiseAbs();
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor) {
      accum(a, g.cwiseProduct(value(a).unaryExpr(
                     [](S x) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); })));
    });
  }

  Tensor exp(Tensor a) {
    Matrix v = value(a).array().exp();
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor self) {
      accum(a, g.cwiseProduct(value(self)));
    });
  }

  Tensor softmax_rows(Tensor a) {
    Matrix v = value(a);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const S m = v.row(i).maxCoeff();
      v.row(i) = (v.row(i).array() - m).exp();
      v.row(i) /= v.row(i).sum();
    }
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor self) {
      const Matrix& y = value(self);
      Matrix out(g.rows(), g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const S dot = g.row(i).cwiseProduct(y.row(i)).sum();
        out.row(i) = (y.row(i).array() * (g.row(i).array() - dot)).matrix();
      }
      accum(a, std::move(out));
    });
  }

  Tensor log_softmax_rows(Tensor a) {
    Matrix v = value(a);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      const S m = v.row(i).maxCoeff();
      const S lse = std::log((v.row(i).array() - m).exp().sum()) + m;
      v.row(i) = v.row(i).array() - lse;
    }
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor self) {
      const Matrix& y = value(self);
      Matrix out(g.rows(), g.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const S gsum = g.row(i).sum();
        out.row(i) = g.row(i) - Eigen::RowVector<S, Eigen::Dynamic>(
                                    (y.row(i).array().exp() * gsum).matrix());
      }
      accum(a, std::move(out));
    });
  }

  /// Column-wise max over rows (pool over points). The first occurrence of
  /// each column maximum receives the gradient.
  Tensor colmax(Tensor a) {
    const Matrix& x = value(a);
    Matrix v(1, x.cols());
    auto arg = std::make_shared<std::vector<Eigen::Index>>(
        static_cast<std::size_t>(x.cols()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = 0;
      for (Eigen::Index r = 1; r < x.rows(); ++r) {
        if (x(r, c) > x(best, c)) best = r;
      }
      (*arg)[static_cast<std::size_t>(c)] = best;
      v(0, c) = x(best, c);
    }
    return push(std::move(v), needs(a), [this, a, arg](const Matrix& g, Tensor) {
      const Matrix& x = value(a);
      Matrix out = Matrix::Zero(x.rows(), x.cols());
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        out((*arg)[static_cast<std::size_t>(c)], c) = g(0, c);
      }
      accum(a, std::move(out));
    });
  }

  /// Per-column normalization over rows with learned scale and shift:
  /// y(:,c) = gamma(c) * (x(:,c) - mean_c) / sqrt(var_c + eps) + beta(c).
  /// gamma and beta are 1 x C. Population variance.
  Tensor normalize_cols(Tensor a, Tensor gamma, Tensor beta, S eps) {
    const Matrix& x = value(a);
    const Eigen::Index n = x.rows();
    auto xhat = std::make_shared<Matrix>(x.rows(), x.cols());
    auto inv_sigma = std::make_shared<Matrix>(1, x.cols());
    Matrix v(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const S mean = x.col(c).mean();
      const S var = (x.col(c).array() - mean).square().sum() / static_cast<S>(n);
      const S inv = S(1) / std::sqrt(var + eps);
      (*inv_sigma)(0, c) = inv;
      xhat->col(c) = (x.col(c).array() - mean) * inv;
      v.col(c) = xhat->col(c) * value(gamma)(0, c) + Matrix::Constant(n, 1, value(beta)(0, c));
    }
    return push(std::move(v), needs(a, gamma, beta),
                [this, a, gamma, beta, xhat, inv_sigma](const Matrix& g, Tensor) {
                  const Eigen::Index n = g.rows();
                  if (node(gamma).requires_grad) {
                    Matrix dg(1, g.cols());
                    for (Eigen::Index c = 0; c < g.cols(); ++c) {
                      dg(0, c) = g.col(c).cwiseProduct(xhat->col(c)).sum();
                    }
                    accum(gamma, std::move(dg));
                  }
                  if (node(beta).requires_grad) {
                    accum(beta, Matrix(g.colwise().sum()));
                  }
                  if (node(a).requires_grad) {
                    Matrix dx(g.rows(), g.cols());
                    for (Eigen::Index c = 0; c < g.cols(); ++c) {
                      const S gam = value(gamma)(0, c);
                      const S gmean = g.col(c).mean();
                      const S gxmean =
                          g.col(c).cwiseProduct(xhat->col(c)).sum() / static_cast<S>(n);
                      dx.col(c) = gam * (*inv_sigma)(0, c) *
                                  (g.col(c).array() - gmean - xhat->col(c).array() * gxmean);
                    }
                    accum(a, std::move(dx));
                  }
                });
  }

  Tensor concat_cols(const std::vector<Tensor>& parts) {
    Eigen::Index rows = value(parts.front()).rows();
    Eigen::Index cols = 0;
    for (Tensor p : parts) cols += value(p).cols();
    Matrix v(rows, cols);
    Eigen::Index at = 0;
    bool rg = false;
    for (Tensor p : parts) {
      v.middleCols(at, value(p).cols()) = value(p);
      at += value(p).cols();
      rg = rg || node(p).requires_grad;
    }
    auto ps = std::make_shared<std::vector<Tensor>>(parts);
    return push(std::move(v), rg, [this, ps](const Matrix& g, Tensor) {
      Eigen::Index at = 0;
      for (Tensor p : *ps) {
        const Eigen::Index w = value(p).cols();
        if (node(p).requires_grad) accum(p, Matrix(g.middleCols(at, w)));
        at += w;
      }
    });
  }

  Tensor slice_cols(Tensor a, Eigen::Index start, Eigen::Index len) {
    Matrix v = value(a).middleCols(start, len);
    return push(std::move(v), needs(a), [this, a, start, len](const Matrix& g, Tensor) {
      const Matrix& x = value(a);
      Matrix out = Matrix::Zero(x.rows(), x.cols());
      out.middleCols(start, len) = g;
      accum(a, std::move(out));
    });
  }

  /// Row gather: out.row(i) = a.row(perm[i]).
  Tensor permute_rows(Tensor a, std::vector<int> perm) {
    const Matrix& x = value(a);
    Matrix v(static_cast<Eigen::Index>(perm.size()), x.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      v.row(static_cast<Eigen::Index>(i)) = x.row(perm[i]);
    }
    auto p = std::make_shared<std::vector<int>>(std::move(perm));
    return push(std::move(v), needs(a), [this, a, p](const Matrix& g, Tensor) {
      const Matrix& x = value(a);
      Matrix out = Matrix::Zero(x.rows(), x.cols());
      for (std::size_t i = 0; i < p->size(); ++i) {
        out.row((*p)[i]) += g.row(static_cast<Eigen::Index>(i));
      }
      accum(a, std::move(out));
    });
  }

  /// Row-major reshape (the flat order walks each row left to right).
  Tensor reshape_rowmajor(Tensor a, Eigen::Index rows, Eigen::Index cols) {
    const Matrix& x = value(a);
    assert(x.size() == rows * cols);
    Matrix v(rows, cols);
    Eigen::Index flat = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c, ++flat) {
        v(flat / cols, flat % cols) = x(r, c);
      }
    }
    return push(std::move(v), needs(a), [this, a, cols](const Matrix& g, Tensor) {
      const Matrix& x = value(a);
      Matrix out(x.rows(), x.cols());
      Eigen::Index flat = 0;
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index c = 0; c < x.cols(); ++c, ++flat) {
          out(r, c) = g(flat / cols, flat % cols);
        }
      }
      accum(a, std::move(out));
    });
  }

  Tensor sum(Tensor a) {
    Matrix v(1, 1);
    v(0, 0) = value(a).sum();
    return push(std::move(v), needs(a), [this, a](const Matrix& g, Tensor) {
      const Matrix& x = value(a);
      accum(a, Matrix(Matrix::Constant(x.rows(), x.cols(), g(0, 0))));
    });
  }

  Tensor mean_all(Tensor a) {
    const Matrix& x = value(a);
    const S inv = S(1) / static_cast<S>(x.size());
    Matrix v(1, 1);
    v(0, 0) = x.sum() * inv;
    return push(std::move(v), needs(a), [this, a, inv](const Matrix& g, Tensor) {
      const Matrix& x = value(a);
      accum(a, Matrix(Matrix::Constant(x.rows(), x.cols(), g(0, 0) * inv)));
    });
  }

  /// Negative log-probability of one class from a 1 x k log-softmax row.
  Tensor nll_index(Tensor log_probs, int index) {
    Matrix v(1, 1);
    v(0, 0) = -value(log_probs)(0, index);
    return push(std::move(v), needs(log_probs), [this, log_probs, index](const Matrix& g, Tensor) {
      const Matrix& x = value(log_probs);
      Matrix out = Matrix::Zero(x.rows(), x.cols());
      out(0, index) = -g(0, 0);
      accum(log_probs, std::move(out));
    });
  }

  /// Scalar node whose value was computed outside the tape (e.g. by an EMD
  /// solver) together with its precomputed gradient with respect to `dep`.
  Tensor external_scalar(S value_in, Tensor dep, Matrix grad_wrt_dep) {
    Matrix v(1, 1);
    v(0, 0) = value_in;
    auto gd = std::make_shared<Matrix>(std::move(grad_wrt_dep));
    return push(std::move(v), needs(dep), [this, dep, gd](const Matrix& g, Tensor) {
      accum(dep, Matrix(g(0, 0) * (*gd)));
    });
  }

  /// Reverse sweep from a scalar root. May be called once per tape.
  void backward(Tensor root) {
    Node& r = node(root);
    assert(value(root).rows() == 1 && value(root).cols() == 1);
    r.grad = Matrix::Constant(1, 1, S(1));
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.requires_grad && n.grad.size() != 0) {
        n.back(n.grad, Tensor{i});
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const Matrix* external = nullptr;
    Matrix val;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(const Matrix&, Tensor)> back;
  };

  Node& node(Tensor t) { return nodes_[static_cast<std::size_t>(t.idx)]; }
  const Node& node(Tensor t) const { return nodes_[static_cast<std::size_t>(t.idx)]; }

  bool needs(Tensor a) const { return node(a).requires_grad; }
  bool needs(Tensor a, Tensor b) const {
    return node(a).requires_grad || node(b).requires_grad;
  }
  bool needs(Tensor a, Tensor b, Tensor c) const {
    return node(a).requires_grad || node(b).requires_grad || node(c).requires_grad;
  }

  void accum(Tensor t, Matrix g) {
    Node& n = node(t);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = std::move(g);
    } else {
      n.grad += g;
    }
  }

  template <typename F>
  Tensor push(Matrix v, bool requires_grad, F&& back) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.val = std::move(v);
    n.requires_grad = requires_grad;
    if constexpr (!std::is_same_v<std::decay_t<F>, std::nullptr_t>) {
      if (requires_grad) n.back = std::forward<F>(back);
    }
    return Tensor{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace pcda::ad
