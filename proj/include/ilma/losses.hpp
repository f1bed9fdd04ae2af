// ilma/losses.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// The four training objectives: transducer negative log posterior over all
// alignments, internal-LM cross-entropy, their weighted combination, and
// the KLD-regularized text-only adaptation loss.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ilma/graph.hpp"
#include "ilma/model.hpp"
#include "ilma/tensor.hpp"

namespace ilma {

struct LossValue {
  double value = 0.0;               // sum over utterances (what the optimizer sees)
  std::vector<double> per_utt;      // per-utterance breakdown for reporting
  int64_t token_count = 0;
  int64_t skipped = 0;              // empty sentences skipped with a warning count

  double per_token() const { return token_count > 0 ? value / static_cast<double>(token_count) : 0.0; }
};

// -log P(Y | X), marginalized over blank/emit alignments on the tape.
inline Graph::Id build_transducer_nll(Graph &g, const TapedParams &tp, const TransducerModel &m,
                                      const Tensor &feats, const TokenSeq &y) {
  const Graph::Id enc = m.tape_encode(g, tp, feats);
  const int64_t t_len = g.value(enc).shape[0];
  const Graph::Id states =
      m.tape_predictor_states(g, tp, y, static_cast<int64_t>(y.size()) + 1);
  const Graph::Id logp = m.tape_joint_logprobs(g, tp, enc, states);
  return g.transducer_nll(logp, y, t_len);
}

// -sum_u log P(y_u | y_<u) under the internal LM.
inline Graph::Id build_ilm_nll(Graph &g, const TapedParams &tp, const TransducerModel &m,
                               const TokenSeq &y) {
  return g.nll_pick(m.tape_ilm_logprobs(g, tp, y), y);
}

// Mixed adaptation target rows: (1-rho) * one-hot(y_u) + rho * P_ref(. | y_<u).
// The reference distribution comes from the frozen snapshot's raw path, so
// it carries no gradient.
inline Tensor ilma_target_rows(const TransducerModel &ref, const TokenSeq &y, double rho) {
  const int64_t v = ref.vocab.size();
  Tensor target({static_cast<int64_t>(y.size()), v});
  DecoderState s = ref.start_state();
  Tensor logp({1, v});
  for (size_t u = 0; u < y.size(); ++u) {
    kern::log_softmax(ref.ilm_logits(s), logp);
    for (int64_t k = 0; k < v; ++k) {
      const double onehot = k == y[u] ? 1.0 - rho : 0.0;
      target.at(static_cast<int64_t>(u), k) = onehot + rho * std::exp(logp.at(0, k));
    }
    s = ref.predictor_step(s, y[u]);
  }
  return target;
}

inline Graph::Id build_ilma_nll(Graph &g, const TapedParams &tp, const TransducerModel &m,
                                const TokenSeq &y, const Tensor &target) {
  return g.nll_mix(m.tape_ilm_logprobs(g, tp, y), target);
}

// KL[p_ref || q] for one step's output distributions; q given in log domain.
inline double kld_term(std::span<const double> p_ref, std::span<const double> log_q) {
  if (p_ref.size() != log_q.size()) throw DimError("kld_term: distribution sizes differ");
  if (!all_finite(log_q)) throw InputError("kld_term: non-finite log distribution");
  double sum = 0.0;
  for (double p : p_ref) sum += p;
  if (std::fabs(sum - 1.0) > 1e-9)
    throw InputError("kld_term: reference distribution is not normalized");
  double acc = 0.0;
  for (size_t i = 0; i < p_ref.size(); ++i) {
    if (p_ref[i] > 0.0) acc += p_ref[i] * (std::log(p_ref[i]) - log_q[i]);
  }
  return acc;
}

// ---- standalone drivers (one graph per call; grads land in ParamStore) ----

inline LossValue transducer_loss(TransducerModel &m, const Tensor &feats, const TokenSeq &y,
                                 bool do_backward = false) {
  Graph g;
  TapedParams tp = m.bind(g);
  const Graph::Id root = build_transducer_nll(g, tp, m, feats, y);
  LossValue lv;
  lv.value = g.scalar(root);
  lv.per_utt = {lv.value};
  lv.token_count = static_cast<int64_t>(y.size());
  if (do_backward) {
    m.params.zero_grads();
    g.backward(root);
  }
  return lv;
}

inline LossValue ilm_corpus_loss(TransducerModel &m, const std::vector<TokenSeq> &corpus,
                                 bool do_backward = false) {
  if (corpus.empty()) throw InputError("ilm_corpus_loss: empty corpus");
  Graph g;
  TapedParams tp = m.bind(g);
  LossValue lv;
  std::vector<Graph::Id> terms;
  for (const TokenSeq &y : corpus) {
    if (y.empty()) {
      ++lv.skipped;
      continue;
    }
    const Graph::Id t = build_ilm_nll(g, tp, m, y);
    lv.per_utt.push_back(g.scalar(t));
    lv.token_count += static_cast<int64_t>(y.size());
    terms.push_back(t);
  }
  if (terms.empty()) return lv;
  const Graph::Id root = g.sum_scalars(terms);
  lv.value = g.scalar(root);
  if (do_backward) {
    m.params.zero_grads();
    g.backward(root);
  }
  return lv;
}

inline LossValue ilmt_loss(TransducerModel &m, const Tensor &feats, const TokenSeq &y,
                           double alpha, bool do_backward = false) {
  if (alpha < 0.0) throw ConfigError("ilmt: alpha must be >= 0");
  Graph g;
  TapedParams tp = m.bind(g);
  const Graph::Id e2e = build_transducer_nll(g, tp, m, feats, y);
  const Graph::Id ilm = build_ilm_nll(g, tp, m, y);
  const Graph::Id root = g.sum_scalars(std::array{e2e, g.scale(ilm, alpha)});
  LossValue lv;
  lv.value = g.scalar(root);
  lv.per_utt = {g.scalar(e2e), g.scalar(ilm)};
  lv.token_count = static_cast<int64_t>(y.size());
  if (do_backward) {
    m.params.zero_grads();
    g.backward(root);
  }
  return lv;
}

// Cross-entropy of the adapted internal LM against the rho-mixture of the
// one-hot target and the frozen reference distribution, summed over the
// corpus. rho = 0 reduces to ilm_corpus_loss bit-exactly.
inline LossValue ilma_loss(TransducerModel &m, const std::vector<TokenSeq> &corpus,
                           const TransducerModel &ref, double rho, bool do_backward = false) {
  if (rho < 0.0 || rho > 1.0) throw ConfigError("ilma: rho must lie in [0, 1]");
  if (corpus.empty()) throw InputError("ilma_loss: empty corpus");
  Graph g;
  TapedParams tp = m.bind(g);
  LossValue lv;
  std::vector<Graph::Id> terms;
  for (const TokenSeq &y : corpus) {
    if (y.empty()) {
      ++lv.skipped;
      continue;
    }
    const Graph::Id t = build_ilma_nll(g, tp, m, y, ilma_target_rows(ref, y, rho));
    lv.per_utt.push_back(g.scalar(t));
    lv.token_count += static_cast<int64_t>(y.size());
    terms.push_back(t);
  }
  if (terms.empty()) return lv;
  const Graph::Id root = g.sum_scalars(terms);
  lv.value = g.scalar(root);
  if (do_backward) {
    m.params.zero_grads();
    g.backward(root);
  }
  return lv;
}

}  // namespace ilma
