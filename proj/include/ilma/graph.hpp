// ilma/graph.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// Reverse-mode autodiff over an append-only tape of primitive ops. Nodes
// are appended in topological order; backward sweeps the tape once in
// reverse, so gradient accumulation order is fixed and runs are
// bit-reproducible.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ilma/kernels.hpp"
#include "ilma/tensor.hpp"

namespace ilma {

enum class Op : uint8_t {
  kLeaf,        // parameter binding; backward flushes into the bound Tensor's grad
  kInput,       // constant value (features, precomputed targets)
  kMatMul,      // [m x k] * [k x n]
  kLinear,      // x * W[r0:r1]^T (+ b[r0:r1])
  kAdd,         // same-shape elementwise
  kAddBias,     // [m x n] + [n]
  kTanh,
  kRelu,
  kLogSoftmax,  // row-wise
  kGatherRows,
  kPairRowSum,  // out[(i*q + j), :] = a[i, :] + b[j, :]
  kStackRows,   // stack 1-D vectors into a matrix
  kScale,       // c * x
  kSum,         // reduce all entries to a scalar
  kSumScalars,
  kNllPick,     // -sum_r logp[r, target_r]
  kNllMix,      // -sum_{r,c} target[r,c] * logp[r,c]
  kTransducerNll,
};

class Graph {
 public:
  using Id = uint32_t;

  Id leaf(Tensor *param) {
    Node n;
    n.op = Op::kLeaf;
    n.val = *param;  // snapshot; training mutates params only between steps
    n.param = param;
    return push(std::move(n));
  }

  Id input(Tensor value) {
    Node n;
    n.op = Op::kInput;
    n.val = std::move(value);
    return push(std::move(n));
  }

  Id matmul(Id a, Id b) {
    const Tensor &ta = val(a), &tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.shape[1] != tb.shape[0])
      throw DimError("matmul: inner extents disagree: " + ta.shape_str() + " * " + tb.shape_str());
    Node n;
    n.op = Op::kMatMul;
    n.in = {a, b};
    n.val = Tensor({ta.shape[0], tb.shape[1]});
    kern::matmul(ta, tb, n.val);
    return push(std::move(n));
  }

  // y = x * W[r0:r1]^T + b[r0:r1]; r1 < 0 means all rows; bias_id < 0 means no bias.
  Id linear(Id x, Id w, int64_t bias_id = -1, int64_t r0 = 0, int64_t r1 = -1) {
    const Tensor &tx = val(x), &tw = val(w);
    if (tx.ndim() != 2 || tw.ndim() != 2 || tx.shape[1] != tw.shape[1])
      throw DimError("linear: input/weight mismatch: " + tx.shape_str() + " vs " + tw.shape_str());
    if (r1 < 0) r1 = tw.shape[0];
    if (r0 < 0 || r1 > tw.shape[0] || r0 >= r1) throw DimError("linear: bad row window");
    Node n;
    n.op = Op::kLinear;
    n.in = {x, w};
    const Tensor *bp = nullptr;
    if (bias_id >= 0) {
      n.in.push_back(static_cast<Id>(bias_id));
      bp = &val(static_cast<Id>(bias_id));
      if (bp->ndim() != 1 || bp->shape[0] != tw.shape[0])
        throw DimError("linear: bias shape " + bp->shape_str() + " does not match weight rows");
    }
    n.row0 = r0;
    n.row1 = r1;
    n.val = Tensor({tx.shape[0], r1 - r0});
    kern::linear(tx, tw, bp, r0, r1, n.val);
    return push(std::move(n));
  }

  Id add(Id a, Id b) {
    const Tensor &ta = val(a), &tb = val(b);
    if (!ta.same_shape(tb))
      throw DimError("add: shape mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
    Node n;
    n.op = Op::kAdd;
    n.in = {a, b};
    n.val = Tensor(ta.shape);
    kern::add(ta, tb, n.val);
    return push(std::move(n));
  }

  Id add_bias(Id x, Id b) {
    const Tensor &tx = val(x), &tb = val(b);
    if (tx.ndim() != 2 || tb.ndim() != 1 || tb.shape[0] != tx.shape[1])
      throw DimError("add_bias: cannot broadcast " + tb.shape_str() + " over " + tx.shape_str());
    Node n;
    n.op = Op::kAddBias;
    n.in = {x, b};
    n.val = Tensor(tx.shape);
    kern::add_bias(tx, tb, n.val);
    return push(std::move(n));
  }

  Id tanh_(Id x) {
    Node n;
    n.op = Op::kTanh;
    n.in = {x};
    n.val = Tensor(val(x).shape);
    kern::tanh_(val(x), n.val);
    return push(std::move(n));
  }

  Id relu(Id x) {
    Node n;
    n.op = Op::kRelu;
    n.in = {x};
    n.val = Tensor(val(x).shape);
    kern::relu(val(x), n.val);
    return push(std::move(n));
  }

  Id log_softmax(Id x) {
    Node n;
    n.op = Op::kLogSoftmax;
    n.in = {x};
    n.val = Tensor(val(x).shape);
    kern::log_softmax(val(x), n.val);
    return push(std::move(n));
  }

  Id gather_rows(Id w, std::vector<int32_t> ids) {
    const Tensor &tw = val(w);
    if (tw.ndim() != 2) throw DimError("gather_rows: weight must be 2-D");
    for (int32_t id : ids) {
      if (id < 0 || id >= tw.shape[0])
        throw IndexError("gather_rows: row id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(tw.shape[0]) + ")");
    }
    Node n;
    n.op = Op::kGatherRows;
    n.in = {w};
    n.val = Tensor({static_cast<int64_t>(ids.size()), tw.shape[1]});
    for (size_t i = 0; i < ids.size(); ++i) {
      auto src = tw.row(ids[i]);
      std::copy(src.begin(), src.end(), n.val.row(static_cast<int64_t>(i)).begin());
    }
    n.ids = std::move(ids);
    return push(std::move(n));
  }

  Id pair_row_sum(Id a, Id b) {
    const Tensor &ta = val(a), &tb = val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.shape[1] != tb.shape[1])
      throw DimError("pair_row_sum: column mismatch: " + ta.shape_str() + " vs " + tb.shape_str());
    const int64_t p = ta.shape[0], q = tb.shape[0], c = ta.shape[1];
    Node n;
    n.op = Op::kPairRowSum;
    n.in = {a, b};
    n.val = Tensor({p * q, c});
    for (int64_t i = 0; i < p; ++i) {
      for (int64_t j = 0; j < q; ++j) {
        const double *ra = ta.data.data() + i * c;
        const double *rb = tb.data.data() + j * c;
        double *ro = n.val.data.data() + (i * q + j) * c;
        for (int64_t l = 0; l < c; ++l) ro[l] = ra[l] + rb[l];
      }
    }
    return push(std::move(n));
  }

  Id stack_rows(std::span<const Id> rows) {
    if (rows.empty()) throw DimError("stack_rows: empty input");
    const int64_t c = val(rows[0]).numel();
    Node n;
    n.op = Op::kStackRows;
    n.val = Tensor({static_cast<int64_t>(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i) {
      const Tensor &r = val(rows[i]);
      if (r.numel() != c) throw DimError("stack_rows: ragged rows");
      n.in.push_back(rows[i]);
      std::copy(r.data.begin(), r.data.end(), n.val.row(static_cast<int64_t>(i)).begin());
    }
    return push(std::move(n));
  }

  Id scale(Id x, double c) {
    Node n;
    n.op = Op::kScale;
    n.in = {x};
    n.c = c;
    n.val = Tensor(val(x).shape);
    for (size_t i = 0; i < n.val.data.size(); ++i) n.val.data[i] = c * val(x).data[i];
    return push(std::move(n));
  }

  Id sum(Id x) {
    Node n;
    n.op = Op::kSum;
    n.in = {x};
    n.val = Tensor({1});
    double acc = 0.0;
    for (double v : val(x).data) acc += v;
    n.val.data[0] = acc;
    return push(std::move(n));
  }

  Id sum_scalars(std::span<const Id> xs) {
    if (xs.empty()) throw DimError("sum_scalars: empty input");
    Node n;
    n.op = Op::kSumScalars;
    n.val = Tensor({1});
    double acc = 0.0;
    for (Id x : xs) {
      if (val(x).numel() != 1) throw DimError("sum_scalars: non-scalar input");
      acc += val(x).data[0];
      n.in.push_back(x);
    }
    n.val.data[0] = acc;
    return push(std::move(n));
  }

  Id nll_pick(Id logp, std::vector<int32_t> targets) {
    const Tensor &t = val(logp);
    if (t.ndim() != 2 || static_cast<int64_t>(targets.size()) != t.shape[0])
      throw DimError("nll_pick: need one target per row");
    for (int32_t y : targets) {
      if (y < 0 || y >= t.shape[1]) throw IndexError("nll_pick: target column out of range");
    }
    Node n;
    n.op = Op::kNllPick;
    n.in = {logp};
    n.val = Tensor({1});
    double acc = 0.0;
    for (int64_t r = 0; r < t.shape[0]; ++r) acc += -t.at(r, targets[static_cast<size_t>(r)]);
    n.val.data[0] = acc;
    n.ids = std::move(targets);
    return push(std::move(n));
  }

  // Cross-entropy of logp rows against a fixed target distribution per row.
  // With a one-hot target row this matches nll_pick on that row bit-exactly
  // (the zero entries contribute signed zeros that cannot change the sum).
  Id nll_mix(Id logp, Tensor target) {
    const Tensor &t = val(logp);
    if (!t.same_shape(target))
      throw DimError("nll_mix: target shape " + target.shape_str() + " vs logp " + t.shape_str());
    Node n;
    n.op = Op::kNllMix;
    n.in = {logp};
    n.val = Tensor({1});
    double acc = 0.0;
    for (int64_t r = 0; r < t.shape[0]; ++r) {
      double row = 0.0;
      for (int64_t c = 0; c < t.shape[1]; ++c) row += target.at(r, c) * t.at(r, c);
      acc += -row;
    }
    n.val.data[0] = acc;
    n.aux = std::move(target);
    return push(std::move(n));
  }

  // Negative log marginal of the label sequence over all monotonic
  // blank/emit alignments. logp holds row-wise log-softmax joint outputs,
  // row (t * (U+1) + u), with blank in the last column.
  Id transducer_nll(Id logp, std::vector<int32_t> labels, int64_t t_len) {
    const Tensor &t = val(logp);
    const int64_t u_len = static_cast<int64_t>(labels.size()) + 1;
    if (t_len < 1) throw InputError("transducer_nll: no frames; alignment infeasible");
    if (t.ndim() != 2 || t.shape[0] != t_len * u_len)
      throw DimError("transducer_nll: logp rows " + t.shape_str() + " do not match grid " +
                     std::to_string(t_len) + "x" + std::to_string(u_len));
    const int64_t blank = t.shape[1] - 1;
    for (int32_t y : labels) {
      if (y < 0 || y >= blank) throw IndexError("transducer_nll: label out of vocabulary");
    }
    Node n;
    n.op = Op::kTransducerNll;
    n.in = {logp};
    n.ids = std::move(labels);
    n.t_len = t_len;
    n.val = Tensor({1});

    std::vector<double> alpha(static_cast<size_t>(t_len * u_len), kNegInf);
    forward_alpha(t, n.ids, t_len, alpha);
    const double total =
        alpha[static_cast<size_t>((t_len - 1) * u_len + (u_len - 1))] +
        t.at((t_len - 1) * u_len + (u_len - 1), blank);
    n.val.data[0] = -total;
    return push(std::move(n));
  }

  const Tensor &value(Id id) const { return nodes_[id].val; }
  double scalar(Id id) const { return nodes_[id].val.data[0]; }
  const Tensor &grad(Id id) const { return nodes_[id].grad; }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Reverse sweep from a scalar root. Visits every node at or below the
  // root exactly once, in reverse append order; leaf visits accumulate the
  // node gradient into the bound parameter's grad buffer.
  void backward(Id root) {
    if (val(root).numel() != 1) throw DimError("backward: root must be scalar");
    for (Id i = 0; i <= root; ++i) {
      nodes_[i].grad = Tensor(nodes_[i].val.shape);
    }
    nodes_[root].grad.data[0] = 1.0;
    for (Id i = root + 1; i-- > 0;) {
      backward_node(nodes_[i]);
    }
  }

 private:
  struct Node {
    Op op = Op::kInput;
    std::vector<Id> in;
    Tensor val;
    Tensor grad;
    Tensor aux;                 // kNllMix target
    std::vector<int32_t> ids;   // gather rows / pick targets / labels
    double c = 0.0;             // kScale factor
    int64_t row0 = 0, row1 = 0; // kLinear row window
    int64_t t_len = 0;          // kTransducerNll frames
    Tensor *param = nullptr;    // kLeaf binding
  };

  Id push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  const Tensor &val(Id id) const { return nodes_[id].val; }
  Tensor &g(Id id) { return nodes_[id].grad; }

  static void forward_alpha(const Tensor &logp, const std::vector<int32_t> &labels, int64_t t_len,
                            std::vector<double> &alpha) {
    const int64_t u_len = static_cast<int64_t>(labels.size()) + 1;
    const int64_t blank = logp.shape[1] - 1;
    alpha[0] = 0.0;
    for (int64_t t = 0; t < t_len; ++t) {
      for (int64_t u = 0; u < u_len; ++u) {
        if (t == 0 && u == 0) continue;
        double a = kNegInf;
        if (t > 0) {
          const int64_t r = (t - 1) * u_len + u;
          a = kern::log_add(a, alpha[static_cast<size_t>(r)] + logp.at(r, blank));
        }
        if (u > 0) {
          const int64_t r = t * u_len + (u - 1);
          a = kern::log_add(a, alpha[static_cast<size_t>(r)] +
                                   logp.at(r, labels[static_cast<size_t>(u - 1)]));
        }
        alpha[static_cast<size_t>(t * u_len + u)] = a;
      }
    }
  }

  void backward_node(Node &n) {
    switch (n.op) {
      case Op::kLeaf:
        if (n.param) {
          n.param->ensure_grad();
          for (size_t i = 0; i < n.grad.data.size(); ++i) n.param->grad[i] += n.grad.data[i];
        }
        break;
      case Op::kInput:
        break;
      case Op::kMatMul: {
        const Tensor &a = val(n.in[0]), &b = val(n.in[1]);
        Tensor &da = g(n.in[0]), &db = g(n.in[1]);
        const int64_t m = a.shape[0], k = a.shape[1], nn = b.shape[1];
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t l = 0; l < k; ++l) {
            double acc = 0.0;
            for (int64_t j = 0; j < nn; ++j) acc += n.grad.at(i, j) * b.at(l, j);
            da.at(i, l) += acc;
          }
        }
        for (int64_t l = 0; l < k; ++l) {
          for (int64_t j = 0; j < nn; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += a.at(i, l) * n.grad.at(i, j);
            db.at(l, j) += acc;
          }
        }
        break;
      }
      case Op::kLinear: {
        const Tensor &x = val(n.in[0]), &w = val(n.in[1]);
        Tensor &dx = g(n.in[0]), &dw = g(n.in[1]);
        const int64_t m = x.shape[0], k = x.shape[1], nn = n.row1 - n.row0;
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < nn; ++j) {
            const double gij = n.grad.at(i, j);
            const double *wrow = w.data.data() + (n.row0 + j) * k;
            double *dxrow = dx.data.data() + i * k;
            for (int64_t l = 0; l < k; ++l) dxrow[l] += gij * wrow[l];
            const double *xrow = x.data.data() + i * k;
            double *dwrow = dw.data.data() + (n.row0 + j) * k;
            for (int64_t l = 0; l < k; ++l) dwrow[l] += gij * xrow[l];
          }
        }
        if (n.in.size() == 3) {
          Tensor &dbias = g(n.in[2]);
          for (int64_t j = 0; j < nn; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += n.grad.at(i, j);
            dbias.data[static_cast<size_t>(n.row0 + j)] += acc;
          }
        }
        break;
      }
      case Op::kAdd: {
        Tensor &da = g(n.in[0]), &db = g(n.in[1]);
        for (size_t i = 0; i < n.grad.data.size(); ++i) {
          da.data[i] += n.grad.data[i];
          db.data[i] += n.grad.data[i];
        }
        break;
      }
      case Op::kAddBias: {
        Tensor &dx = g(n.in[0]), &db = g(n.in[1]);
        const int64_t m = n.val.shape[0], nn = n.val.shape[1];
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < nn; ++j) dx.at(i, j) += n.grad.at(i, j);
        for (int64_t j = 0; j < nn; ++j) {
          double acc = 0.0;
          for (int64_t i = 0; i < m; ++i) acc += n.grad.at(i, j);
          db.data[static_cast<size_t>(j)] += acc;
        }
        break;
      }
      case Op::kTanh: {
        Tensor &dx = g(n.in[0]);
        for (size_t i = 0; i < n.grad.data.size(); ++i)
          dx.data[i] += n.grad.data[i] * (1.0 - n.val.data[i] * n.val.data[i]);
        break;
      }
      case Op::kRelu: {
        const Tensor &x = val(n.in[0]);
        Tensor &dx = g(n.in[0]);
        // subgradient at exactly 0 is 0
        for (size_t i = 0; i < n.grad.data.size(); ++i)
          dx.data[i] += x.data[i] > 0.0 ? n.grad.data[i] : 0.0;
        break;
      }
      case Op::kLogSoftmax: {
        Tensor &dx = g(n.in[0]);
        const int64_t rows = n.val.ndim() == 1 ? 1 : n.val.shape[0];
        const int64_t nn = n.val.ndim() == 1 ? n.val.shape[0] : n.val.shape[1];
        for (int64_t r = 0; r < rows; ++r) {
          const double *yr = n.val.data.data() + r * nn;
          const double *gr = n.grad.data.data() + r * nn;
          double *dxr = dx.data.data() + r * nn;
          double gsum = 0.0;
          for (int64_t j = 0; j < nn; ++j) gsum += gr[j];
          for (int64_t j = 0; j < nn; ++j) dxr[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
        break;
      }
      case Op::kGatherRows: {
        Tensor &dw = g(n.in[0]);
        const int64_t c = n.val.shape[1];
        for (size_t i = 0; i < n.ids.size(); ++i) {
          double *drow = dw.data.data() + static_cast<int64_t>(n.ids[i]) * c;
          const double *grow = n.grad.data.data() + static_cast<int64_t>(i) * c;
          for (int64_t l = 0; l < c; ++l) drow[l] += grow[l];
        }
        break;
      }
      case Op::kPairRowSum: {
        Tensor &da = g(n.in[0]), &db = g(n.in[1]);
        const int64_t p = da.shape[0], q = db.shape[0], c = da.shape[1];
        for (int64_t i = 0; i < p; ++i) {
          for (int64_t j = 0; j < q; ++j) {
            const double *grow = n.grad.data.data() + (i * q + j) * c;
            double *darow = da.data.data() + i * c;
            for (int64_t l = 0; l < c; ++l) darow[l] += grow[l];
          }
        }
        for (int64_t j = 0; j < q; ++j) {
          double *dbrow = db.data.data() + j * c;
          for (int64_t i = 0; i < p; ++i) {
            const double *grow = n.grad.data.data() + (i * q + j) * c;
            for (int64_t l = 0; l < c; ++l) dbrow[l] += grow[l];
          }
        }
        break;
      }
      case Op::kStackRows: {
        const int64_t c = n.val.shape[1];
        for (size_t i = 0; i < n.in.size(); ++i) {
          Tensor &dr = g(n.in[i]);
          const double *grow = n.grad.data.data() + static_cast<int64_t>(i) * c;
          for (int64_t l = 0; l < c; ++l) dr.data[static_cast<size_t>(l)] += grow[l];
        }
        break;
      }
      case Op::kScale: {
        Tensor &dx = g(n.in[0]);
        for (size_t i = 0; i < n.grad.data.size(); ++i) dx.data[i] += n.c * n.grad.data[i];
        break;
      }
      case Op::kSum: {
        Tensor &dx = g(n.in[0]);
        const double gv = n.grad.data[0];
        for (double &v : dx.data) v += gv;
        break;
      }
      case Op::kSumScalars: {
        for (Id in : n.in) g(in).data[0] += n.grad.data[0];
        break;
      }
      case Op::kNllPick: {
        Tensor &dx = g(n.in[0]);
        const double gv = n.grad.data[0];
        for (size_t r = 0; r < n.ids.size(); ++r)
          dx.at(static_cast<int64_t>(r), n.ids[r]) -= gv;
        break;
      }
      case Op::kNllMix: {
        Tensor &dx = g(n.in[0]);
        const double gv = n.grad.data[0];
        for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] -= gv * n.aux.data[i];
        break;
      }
      case Op::kTransducerNll: {
        backward_transducer(n);
        break;
      }
    }
  }

  // Occupancy-weighted gradient: d(-log P)/d logp[arc] is minus the
  // posterior mass of alignments through that arc.
  void backward_transducer(Node &n) {
    const Tensor &logp = val(n.in[0]);
    Tensor &dx = g(n.in[0]);
    const int64_t u_len = static_cast<int64_t>(n.ids.size()) + 1;
    const int64_t t_len = n.t_len;
    const int64_t blank = logp.shape[1] - 1;
    const double gv = n.grad.data[0];

    std::vector<double> alpha(static_cast<size_t>(t_len * u_len), kNegInf);
    forward_alpha(logp, n.ids, t_len, alpha);
    std::vector<double> beta(static_cast<size_t>(t_len * u_len), kNegInf);
    for (int64_t t = t_len - 1; t >= 0; --t) {
      for (int64_t u = u_len - 1; u >= 0; --u) {
        const int64_t r = t * u_len + u;
        double b = kNegInf;
        if (t == t_len - 1 && u == u_len - 1) {
          b = logp.at(r, blank);
        } else {
          if (t < t_len - 1)
            b = kern::log_add(b, logp.at(r, blank) + beta[static_cast<size_t>(r + u_len)]);
          if (u < u_len - 1)
            b = kern::log_add(b, logp.at(r, n.ids[static_cast<size_t>(u)]) +
                                     beta[static_cast<size_t>(r + 1)]);
        }
        beta[static_cast<size_t>(r)] = b;
      }
    }
    const double total = beta[0];
    for (int64_t t = 0; t < t_len; ++t) {
      for (int64_t u = 0; u < u_len; ++u) {
        const int64_t r = t * u_len + u;
        const double a = alpha[static_cast<size_t>(r)];
        double blank_tail;
        if (t < t_len - 1) {
          blank_tail = beta[static_cast<size_t>(r + u_len)];
        } else {
          blank_tail = (u == u_len - 1) ? 0.0 : kNegInf;
        }
        const double occ_b = std::exp(a + logp.at(r, blank) + blank_tail - total);
        dx.at(r, blank) -= gv * occ_b;
        if (u < u_len - 1) {
          const int32_t y = n.ids[static_cast<size_t>(u)];
          const double occ_y =
              std::exp(a + logp.at(r, y) + beta[static_cast<size_t>(r + 1)] - total);
          dx.at(r, y) -= gv * occ_y;
        }
      }
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace ilma
