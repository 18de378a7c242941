#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
// A Tape owns a flat arena of nodes; Var is an index into it. Backward
// runs in reverse creation order, so any value built through the ops
// below gets exact gradients for every leaf it depends on.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ramoe::ad {

using Mat = Eigen::MatrixXd;

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  const Mat& val(Var v) const { return nodes_[check(v)].value; }
  const Mat& grad(Var v) const { return nodes_[check(v)].grad; }
  double scalar(Var v) const { return val(v)(0, 0); }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Mat m) { return push(std::move(m), nullptr); }

  Var matmul(Var a, Var b) {
    Mat out = val(a) * val(b);
    return push(std::move(out), [a, b, this](const Mat& g, int) {
      acc(a, g * val(b).transpose());
      acc(b, val(a).transpose() * g);
    });
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    Mat out = val(a) * val(b).transpose();
    return push(std::move(out), [a, b, this](const Mat& g, int) {
      acc(a, g * val(b));
      acc(b, g.transpose() * val(a));
    });
  }

  Var add(Var a, Var b) {
    Mat out = val(a) + val(b);
    return push(std::move(out), [a, b, this](const Mat& g, int) {
      acc(a, g);
      acc(b, g);
    });
  }

  Var scale(Var a, double s) {
    Mat out = val(a) * s;
    return push(std::move(out), [a, s, this](const Mat& g, int) { acc(a, g * s); });
  }

  Var relu(Var a) {
    Mat out = val(a).cwiseMax(0.0);
    return push(std::move(out), [a, this](const Mat& g, int self) {
      acc(a, (nodes_[self].value.array() > 0.0).cast<double>().matrix().cwiseProduct(g));
    });
  }

  // Row-wise x / sqrt(mean(x^2) + eps).
  Var rmsnorm_rows(Var a, double eps = 1e-8) {
    const Mat& x = val(a);
    const int d = static_cast<int>(x.cols());
    Eigen::VectorXd r(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      r(i) = std::sqrt(x.row(i).squaredNorm() / d + eps);
    Mat out = x.array().colwise() / r.array();
    return push(std::move(out), [a, r, d, this](const Mat& g, int) {
      const Mat& x = val(a);
      Mat gx(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double ri = r(i);
        const double dot = g.row(i).dot(x.row(i));
        gx.row(i) = g.row(i) / ri - x.row(i) * (dot / (d * ri * ri * ri));
      }
      acc(a, gx);
    });
  }

  Var softmax_rows(Var a) { return softmax_impl(a, false); }
  Var causal_softmax_rows(Var a) { return softmax_impl(a, true); }

  Var gather_rows(Var a, std::vector<int> rows) {
    const Mat& x = val(a);
    Mat out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return push(std::move(out), [a, rows = std::move(rows), this](const Mat& g, int) {
      Mat gx = Mat::Zero(val(a).rows(), val(a).cols());
      for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
      acc(a, gx);
    });
  }

  // out[targets[i], :] += gates(i) * src.row(i); out has total_rows rows.
  Var scatter_rows_scaled(Var src, Var gates, std::vector<int> targets, int total_rows) {
    const Mat& s = val(src);
    const Mat& w = val(gates);
    if (w.rows() != s.rows() || w.cols() != 1) throw std::invalid_argument("scatter: gate shape");
    Mat out = Mat::Zero(total_rows, s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) out.row(targets[static_cast<std::size_t>(i)]) += w(i, 0) * s.row(i);
    return push(std::move(out), [src, gates, targets = std::move(targets), this](const Mat& g, int) {
      const Mat& s = val(src);
      const Mat& w = val(gates);
      Mat gs(s.rows(), s.cols());
      Mat gw(w.rows(), 1);
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const auto grow = g.row(targets[static_cast<std::size_t>(i)]);
        gs.row(i) = w(i, 0) * grow;
        gw(i, 0) = grow.dot(s.row(i));
      }
      acc(src, gs);
      acc(gates, gw);
    });
  }

  // Per-row renormalized top-k gates. sel[t] lists the chosen column ids for
  // row t of p; out(t, j) = p(t, sel[t][j]) / sum_j p(t, sel[t][j]).
  Var topk_gates(Var p, std::vector<std::vector<int>> sel) {
    const Mat& pv = val(p);
    const int k = static_cast<int>(sel.empty() ? 0 : sel[0].size());
    Mat out(pv.rows(), k);
    for (Eigen::Index t = 0; t < pv.rows(); ++t) {
      double s = 0.0;
      for (int j = 0; j < k; ++j) s += pv(t, sel[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)]);
      for (int j = 0; j < k; ++j) out(t, j) = pv(t, sel[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)]) / s;
    }
    return push(std::move(out), [p, sel = std::move(sel), k, this](const Mat& g, int self) {
      const Mat& pv = val(p);
      const Mat& gates = nodes_[self].value;
      Mat gp = Mat::Zero(pv.rows(), pv.cols());
      for (Eigen::Index t = 0; t < pv.rows(); ++t) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += pv(t, sel[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)]);
        // d gate_j / d p_i = (delta_ij - gate_j) / s  over the selected set
        double gdot = 0.0;
        for (int j = 0; j < k; ++j) gdot += g(t, j) * gates(t, j);
        for (int i = 0; i < k; ++i)
          gp(t, sel[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]) += (g(t, i) - gdot) / s;
      }
      acc(p, gp);
    });
  }

  // Column vector of a(coords[i].first, coords[i].second).
  Var gather_elems(Var a, std::vector<std::pair<int, int>> coords) {
    const Mat& x = val(a);
    Mat out(static_cast<Eigen::Index>(coords.size()), 1);
    for (std::size_t i = 0; i < coords.size(); ++i) out(static_cast<Eigen::Index>(i), 0) = x(coords[i].first, coords[i].second);
    return push(std::move(out), [a, coords = std::move(coords), this](const Mat& g, int) {
      Mat gx = Mat::Zero(val(a).rows(), val(a).cols());
      for (std::size_t i = 0; i < coords.size(); ++i) gx(coords[i].first, coords[i].second) += g(static_cast<Eigen::Index>(i), 0);
      acc(a, gx);
    });
  }

  // 1 x cols mean of the listed rows.
  Var mean_rows_subset(Var a, std::vector<int> rows) {
    const Mat& x = val(a);
    Mat out = Mat::Zero(1, x.cols());
    for (int r : rows) out.row(0) += x.row(r);
    out /= static_cast<double>(rows.size());
    return push(std::move(out), [a, rows = std::move(rows), this](const Mat& g, int) {
      Mat gx = Mat::Zero(val(a).rows(), val(a).cols());
      const double inv = 1.0 / static_cast<double>(rows.size());
      for (int r : rows) gx.row(r) += inv * g.row(0);
      acc(a, gx);
    });
  }

  // Mean NLL over mask rows; targets[t] is the label for logits row t.
  Var cross_entropy(Var logits, std::vector<int> targets, std::vector<int> mask_rows) {
    if (mask_rows.empty()) throw std::invalid_argument("cross_entropy: empty loss mask");
    const Mat& z = val(logits);
    double loss = 0.0;
    for (int t : mask_rows) {
      const double m = z.row(t).maxCoeff();
      const double lse = m + std::log((z.row(t).array() - m).exp().sum());
      loss += lse - z(t, targets[static_cast<std::size_t>(t)]);
    }
    loss /= static_cast<double>(mask_rows.size());
    Mat out(1, 1);
    out(0, 0) = loss;
    return push(std::move(out),
                [logits, targets = std::move(targets), mask_rows = std::move(mask_rows), this](const Mat& g, int) {
                  const Mat& z = val(logits);
                  Mat gz = Mat::Zero(z.rows(), z.cols());
                  const double c = g(0, 0) / static_cast<double>(mask_rows.size());
                  for (int t : mask_rows) {
                    const double m = z.row(t).maxCoeff();
                    Eigen::RowVectorXd p = (z.row(t).array() - m).exp();
                    p /= p.sum();
                    gz.row(t) = c * p;
                    gz(t, targets[static_cast<std::size_t>(t)]) -= c;
                  }
                  acc(logits, gz);
                });
  }

  // KL(ref~ || q~) with both sides restricted to expert_set and renormalized.
  // q~ entries are floored at eps then renormalized; if the restricted live
  // mass is below eps the uniform fallback is used (gradient zero there).
  // ref_full is a constant. Natural log, 0*log 0 := 0.
  Var kl_restricted(Var q, const Eigen::VectorXd& ref_full, std::vector<int> expert_set, double eps,
                    bool* mass_underflow = nullptr) {
    if (expert_set.empty()) throw std::invalid_argument("kl_restricted: empty expert set");
    const Mat& qv = val(q);  // 1 x E
    const int n = static_cast<int>(expert_set.size());
    Eigen::VectorXd r(n), qs(n);
    double rsum = 0.0, s = 0.0;
    for (int i = 0; i < n; ++i) {
      r(i) = ref_full(expert_set[static_cast<std::size_t>(i)]);
      qs(i) = qv(0, expert_set[static_cast<std::size_t>(i)]);
      rsum += r(i);
      s += qs(i);
    }
    if (rsum <= 0.0) throw std::invalid_argument("kl_restricted: reference has zero mass on set");
    r /= rsum;
    bool underflow = s < eps;
    if (mass_underflow) *mass_underflow = underflow;
    Eigen::VectorXd w(n);
    if (underflow) {
      w.setConstant(1.0 / n);
    } else {
      Eigen::VectorXd v = (qs / s).cwiseMax(eps);
      w = v / v.sum();
    }
    double loss = 0.0;
    for (int i = 0; i < n; ++i)
      if (r(i) > 0.0) loss += r(i) * (std::log(r(i)) - std::log(w(i)));
    Mat out(1, 1);
    out(0, 0) = loss;
    return push(std::move(out), [q, r, expert_set = std::move(expert_set), eps, underflow, this](const Mat& g, int) {
      if (underflow) return;
      const Mat& qv = val(q);
      const int n = static_cast<int>(expert_set.size());
      Eigen::VectorXd qs(n);
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        qs(i) = qv(0, expert_set[static_cast<std::size_t>(i)]);
        s += qs(i);
      }
      Eigen::VectorXd u = qs / s;
      Eigen::VectorXd v = u.cwiseMax(eps);
      const double Z = v.sum();
      Eigen::VectorXd w = v / Z;
      // dL/dw_i = -r_i / w_i; w = v/Z; v = max(u, eps); u = q/s
      Eigen::VectorXd dLdw(n);
      for (int i = 0; i < n; ++i) dLdw(i) = -r(i) / w(i);
      const double wdot = dLdw.dot(w);
      Eigen::VectorXd dLdv = (dLdw.array() - wdot) / Z;
      Eigen::VectorXd dLdu(n);
      for (int i = 0; i < n; ++i) dLdu(i) = (u(i) > eps) ? dLdv(i) : 0.0;
      const double udot = dLdu.dot(u);
      Mat gq = Mat::Zero(1, qv.cols());
      for (int i = 0; i < n; ++i) gq(0, expert_set[static_cast<std::size_t>(i)]) = g(0, 0) * (dLdu(i) - udot) / s;
      acc(q, gq);
    });
  }

  // Scalar <c, a> (Frobenius inner product with a constant).
  Var inner(Var a, Mat c) {
    Mat out(1, 1);
    out(0, 0) = (val(a).array() * c.array()).sum();
    return push(std::move(out), [a, c = std::move(c), this](const Mat& g, int) { acc(a, g(0, 0) * c); });
  }

  // Scalar sum_i ws[i] * xs[i], all 1x1.
  Var weighted_sum(std::vector<Var> xs, std::vector<double> ws) {
    double v = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) v += ws[i] * val(xs[i])(0, 0);
    Mat out(1, 1);
    out(0, 0) = v;
    return push(std::move(out), [xs = std::move(xs), ws = std::move(ws), this](const Mat& g, int) {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        Mat gi(1, 1);
        gi(0, 0) = g(0, 0) * ws[i];
        acc(xs[i], gi);
      }
    });
  }

  void backward(Var loss) {
    if (val(loss).rows() != 1 || val(loss).cols() != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
    nodes_[static_cast<std::size_t>(loss.idx)].grad(0, 0) = 1.0;
    for (int i = loss.idx; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && n.grad.cwiseAbs().maxCoeff() != 0.0) n.back(n.grad, i);
    }
  }

 private:
  using BackFn = std::function<void(const Mat& upstream, int self)>;

  struct Node {
    Mat value;
    Mat grad;
    BackFn back;
  };

  std::vector<Node> nodes_;

  int check(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.idx) >= nodes_.size()) throw std::out_of_range("bad Var");
    return v.idx;
  }

  Var push(Mat value, BackFn back) {
    Node n;
    n.grad = Mat::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void acc(Var v, const Mat& g) { nodes_[static_cast<std::size_t>(v.idx)].grad += g; }

  Var softmax_impl(Var a, bool causal) {
    const Mat& x = val(a);
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::Index hi = causal ? i + 1 : x.cols();
      auto seg = x.row(i).head(hi);
      const double m = seg.maxCoeff();
      Eigen::RowVectorXd e = (seg.array() - m).exp();
      out.row(i).setZero();
      out.row(i).head(hi) = e / e.sum();
    }
    return push(std::move(out), [a, causal, this](const Mat& g, int self) {
      const Mat& p = nodes_[self].value;
      Mat gx = Mat::Zero(p.rows(), p.cols());
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const Eigen::Index hi = causal ? i + 1 : p.cols();
        const double dot = g.row(i).head(hi).dot(p.row(i).head(hi));
        gx.row(i).head(hi) =
            (g.row(i).head(hi).array() - dot) * p.row(i).head(hi).array();
      }
      acc(a, gx);
    });
  }
};

}  // namespace ramoe::ad
