// tests/helpers.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// Shared fixtures and test-side oracles. Everything here is independent of
// the library's forward-backward implementation paths it is used to check.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ilma/fd_check.hpp"
#include "ilma/kernels.hpp"
#include "ilma/losses.hpp"
#include "ilma/model.hpp"
#include "ilma/tensor.hpp"

namespace testing {

inline ilma::Vocab make_vocab(int n) {
  std::vector<std::string> toks;
  for (int i = 0; i < n; ++i) toks.push_back("t" + std::to_string(i));
  return ilma::Vocab(toks);
}

inline ilma::ModelConfig tiny_config(int64_t feature_dim = 3, int64_t hidden = 6,
                                     int64_t joint = 5) {
  ilma::ModelConfig cfg;
  cfg.feature_dim = feature_dim;
  cfg.encoder_hidden = hidden;
  cfg.encoder_layers = 2;
  cfg.subsample = 2;
  cfg.embed_dim = 4;
  cfg.predictor_hidden = hidden;
  cfg.joint_dim = joint;
  return cfg;
}

inline ilma::TransducerModel tiny_model(int vocab_size = 3, uint64_t seed = 7,
                                        ilma::ModelConfig cfg = tiny_config()) {
  return ilma::TransducerModel::create(cfg, make_vocab(vocab_size), seed);
}

inline void zero_params(ilma::TransducerModel &m) {
  for (size_t i = 0; i < m.params.size(); ++i) {
    auto &t = m.params.item(i).second;
    std::fill(t.data.begin(), t.data.end(), 0.0);
  }
}

inline ilma::Tensor random_feats(int64_t t, int64_t d, ilma::Rng &rng) {
  ilma::Tensor x({t, d});
  for (double &v : x.data) v = rng.uniform(-1.0, 1.0);
  return x;
}

// Per-cell joint log-probabilities computed through the raw inference path
// (no tape, no lattice recursion): rows t * (U+1) + u, blank last.
inline ilma::Tensor raw_cell_logprobs(const ilma::TransducerModel &m, const ilma::Tensor &feats,
                                      const ilma::TokenSeq &y) {
  const ilma::Tensor enc = m.encode(feats);
  const ilma::Tensor pe = m.enc_projection(enc);
  const int64_t t_len = enc.shape[0];
  const int64_t u_len = static_cast<int64_t>(y.size()) + 1;
  std::vector<ilma::Tensor> pp;
  ilma::DecoderState s = m.start_state();
  pp.push_back(m.pred_projection(s));
  for (int32_t tok : y) {
    s = m.predictor_step(s, tok);
    pp.push_back(m.pred_projection(s));
  }
  ilma::Tensor logp({t_len * u_len, static_cast<int64_t>(m.vocab.full_size())});
  ilma::Tensor row({1, static_cast<int64_t>(m.vocab.full_size())});
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t u = 0; u < u_len; ++u) {
      const ilma::Tensor logits =
          m.joint_from_projections(pe.row(t), pp[static_cast<size_t>(u)].data);
      ilma::kern::log_softmax(logits, row);
      std::copy(row.data.begin(), row.data.end(), logp.row(t * u_len + u).begin());
    }
  }
  return logp;
}

// Exhaustive alignment-enumeration oracle for the transducer loss: walks
// every monotonic blank/emit path, no dynamic programming, no memoization.
inline double enumerate_alignment_nll(const ilma::Tensor &logp, const ilma::TokenSeq &y,
                                      int64_t t_len) {
  const int64_t u_len = static_cast<int64_t>(y.size()) + 1;
  const int64_t blank = logp.shape[1] - 1;
  std::vector<double> path_logps;
  std::function<void(int64_t, int64_t, double)> walk = [&](int64_t t, int64_t u, double acc) {
    const int64_t r = t * u_len + u;
    if (u < u_len - 1) walk(t, u + 1, acc + logp.at(r, y[static_cast<size_t>(u)]));
    const double with_blank = acc + logp.at(r, blank);
    if (t < t_len - 1)
      walk(t + 1, u, with_blank);
    else if (u == u_len - 1)
      path_logps.push_back(with_blank);  // final blank leaves the grid
  };
  walk(0, 0, 0.0);
  double m = ilma::kNegInf;
  for (double v : path_logps) m = std::max(m, v);
  double s = 0.0;
  for (double v : path_logps) s += std::exp(v - m);
  return -(m + std::log(s));
}

// Central finite differences over model parameters for an arbitrary loss.
// fwd recomputes the scalar; bwd populates ParamStore gradients.
inline double model_fd_max_rel_err(ilma::TransducerModel &m,
                                   const std::function<double(ilma::TransducerModel &)> &fwd,
                                   const std::function<void(ilma::TransducerModel &)> &bwd,
                                   int64_t probes_per_tensor, uint64_t probe_seed,
                                   double h = 1e-5, int64_t *checked = nullptr) {
  bwd(m);
  std::vector<std::vector<double>> analytic;
  for (size_t i = 0; i < m.params.size(); ++i) analytic.push_back(m.params.item(i).second.grad);

  ilma::Rng rng(probe_seed);
  double worst = 0.0;
  int64_t count = 0;
  for (size_t pi = 0; pi < m.params.size(); ++pi) {
    ilma::Tensor &p = m.params.item(pi).second;
    for (int64_t k = 0; k < probes_per_tensor; ++k) {
      const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(p.numel())));
      const double saved = p.at(j);
      p.at(j) = saved + h;
      const double fp = fwd(m);
      p.at(j) = saved - h;
      const double fm = fwd(m);
      p.at(j) = saved;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, ilma::grad_rel_err(analytic[pi][static_cast<size_t>(j)], fd));
      ++count;
    }
  }
  if (checked) *checked = count;
  return worst;
}

inline bool same_bits(const std::vector<double> &a, const std::vector<double> &b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

inline bool same_params(const ilma::ParamStore &a, const ilma::ParamStore &b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a.item(i).first != b.item(i).first) return false;
    if (!same_bits(a.item(i).second.data, b.item(i).second.data)) return false;
  }
  return true;
}

}  // namespace testing
