// ilma/fd_check.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// Central finite-difference verification of reverse-mode gradients. The
// scalar under test is rebuilt from scratch for every probe, so the check
// is independent of any state the tape may carry.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ilma/graph.hpp"
#include "ilma/tensor.hpp"

namespace ilma {

// Builds the scalar under test from leaves bound to the given tensors.
using ScalarBuilder = std::function<Graph::Id(Graph &, const std::vector<Graph::Id> &)>;

// Scale-aware relative error with unit floor, so tiny gradients are judged
// on an absolute scale.
inline double grad_rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

// Compares analytic gradients of `build` against central differences with
// step h. `max_probes_per_tensor` < 0 checks every entry; otherwise a
// deterministic random subset is probed.
inline FdReport fd_check(const ScalarBuilder &build, std::vector<Tensor> &params, double h = 1e-5,
                         int64_t max_probes_per_tensor = -1, uint64_t probe_seed = 1) {
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    std::vector<Graph::Id> leaves;
    leaves.reserve(params.size());
    for (auto &p : params) {
      p.grad.clear();
      leaves.push_back(g.leaf(&p));
    }
    const Graph::Id root = build(g, leaves);
    g.backward(root);
    for (auto &p : params) analytic.push_back(p.grad);
  }

  const auto eval = [&]() {
    Graph g;
    std::vector<Graph::Id> leaves;
    leaves.reserve(params.size());
    for (auto &p : params) leaves.push_back(g.leaf(&p));
    return g.scalar(build(g, leaves));
  };

  Rng rng(probe_seed);
  FdReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor &p = params[pi];
    std::vector<int64_t> probes;
    if (max_probes_per_tensor < 0 || p.numel() <= max_probes_per_tensor) {
      for (int64_t j = 0; j < p.numel(); ++j) probes.push_back(j);
    } else {
      for (int64_t k = 0; k < max_probes_per_tensor; ++k)
        probes.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(p.numel()))));
    }
    for (int64_t j : probes) {
      const double saved = p.at(j);
      p.at(j) = saved + h;
      const double fp = eval();
      p.at(j) = saved - h;
      const double fm = eval();
      p.at(j) = saved;
      const double fd = (fp - fm) / (2.0 * h);
      rep.max_rel_err = std::max(rep.max_rel_err, grad_rel_err(analytic[pi][static_cast<size_t>(j)], fd));
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace ilma
