// ilma/train.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// Optimization loops for the three stages: baseline transducer training,
// training with the added internal-LM loss, and text-only adaptation of
// the internal LM with a selectable parameter scope.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ilma/losses.hpp"
#include "ilma/model.hpp"
#include "ilma/tensor.hpp"

namespace ilma {

// Which parameters text-only adaptation may update. No scope ever touches
// the encoder.
enum class AdaptScope : uint8_t {
  kFullILM,        // prediction network + joint network
  kPredictorOnly,  // prediction network alone
  kJoinerNB,       // non-blank rows of the joint output layer only
};

inline std::string scope_name(AdaptScope s) {
  switch (s) {
    case AdaptScope::kFullILM: return "full_ilm";
    case AdaptScope::kPredictorOnly: return "predictor_only";
    case AdaptScope::kJoinerNB: return "joiner_nb";
  }
  return "?";
}

inline AdaptScope scope_from_name(const std::string &s) {
  if (s == "full_ilm" || s == "ilm") return AdaptScope::kFullILM;
  if (s == "predictor_only" || s == "predictor") return AdaptScope::kPredictorOnly;
  if (s == "joiner_nb" || s == "joiner") return AdaptScope::kJoinerNB;
  throw ConfigError("unknown adaptation scope '" + s +
                    "' (expected full_ilm, predictor_only or joiner_nb)");
}

// Per-element update mask aligned with ParamStore registration order.
struct UpdateMask {
  std::vector<std::vector<uint8_t>> keep;

  static UpdateMask all(const ParamStore &params) {
    UpdateMask m;
    for (size_t i = 0; i < params.size(); ++i)
      m.keep.emplace_back(static_cast<size_t>(params.item(i).second.numel()), uint8_t{1});
    return m;
  }

  static UpdateMask none(const ParamStore &params) {
    UpdateMask m;
    for (size_t i = 0; i < params.size(); ++i)
      m.keep.emplace_back(static_cast<size_t>(params.item(i).second.numel()), uint8_t{0});
    return m;
  }

  static UpdateMask for_scope(const TransducerModel &model, AdaptScope scope) {
    UpdateMask m = none(model.params);
    auto mark = [&](const std::string &name) {
      for (size_t i = 0; i < model.params.size(); ++i) {
        if (model.params.item(i).first == name)
          std::fill(m.keep[i].begin(), m.keep[i].end(), uint8_t{1});
      }
    };
    auto mark_predictor = [&] {
      mark("predictor.embed");
      mark("predictor.w_x");
      mark("predictor.w_h");
      mark("predictor.b");
      mark("predictor.h0");
    };
    switch (scope) {
      case AdaptScope::kFullILM:
        mark_predictor();
        mark("joiner.w_e");
        mark("joiner.b_e");
        mark("joiner.w_p");
        mark("joiner.b_p");
        mark("joiner.w_j");
        mark("joiner.b_j");
        break;
      case AdaptScope::kPredictorOnly:
        mark_predictor();
        break;
      case AdaptScope::kJoinerNB: {
        // only the non-blank rows; the blank row stays frozen
        const int32_t v = model.vocab.size();
        for (size_t i = 0; i < model.params.size(); ++i) {
          const auto &name = model.params.item(i).first;
          const auto &t = model.params.item(i).second;
          if (name == "joiner.w_j") {
            std::fill(m.keep[i].begin(), m.keep[i].begin() + v * t.shape[1], uint8_t{1});
          } else if (name == "joiner.b_j") {
            std::fill(m.keep[i].begin(), m.keep[i].begin() + v, uint8_t{1});
          }
        }
        break;
      }
    }
    return m;
  }
};

struct OptimizerConfig {
  double step_size = 1e-3;
  double moment_decay = 0.999;  // second-moment decay
  double eps = 1e-8;
  double clip_norm = 5.0;       // global norm over in-scope gradients
};

// Momentum-free adaptive-moment update: a running second moment with bias
// correction scales each step; no first moment is kept.
class MomentOptimizer {
 public:
  MomentOptimizer(const ParamStore &params, OptimizerConfig cfg) : cfg_(cfg) {
    for (size_t i = 0; i < params.size(); ++i)
      v_.emplace_back(static_cast<size_t>(params.item(i).second.numel()), 0.0);
  }

  // Applies one masked update from the gradients in `params`. Parameters
  // outside the mask are left untouched, bit for bit.
  void step(ParamStore &params, const UpdateMask &mask) {
    ++t_;
    double norm_sq = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
      const Tensor &p = params.item(i).second;
      for (size_t j = 0; j < p.grad.size(); ++j) {
        if (mask.keep[i][j]) norm_sq += p.grad[j] * p.grad[j];
      }
    }
    const double norm = std::sqrt(norm_sq);
    const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
                             ? cfg_.clip_norm / norm
                             : 1.0;
    const double correction = 1.0 - std::pow(cfg_.moment_decay, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor &p = params.item(i).second;
      for (size_t j = 0; j < p.grad.size(); ++j) {
        if (!mask.keep[i][j]) continue;
        const double gclip = scale * p.grad[j];
        v_[i][j] = cfg_.moment_decay * v_[i][j] + (1.0 - cfg_.moment_decay) * gclip * gclip;
        const double vhat = v_[i][j] / correction;
        p.data[j] -= cfg_.step_size * gclip / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> v_;
  int64_t t_ = 0;
};

enum class Stage : uint8_t { kBaseline, kIlmt, kIlma };

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kBaseline: return "baseline";
    case Stage::kIlmt: return "ilmt";
    case Stage::kIlma: return "ilma";
  }
  return "?";
}

struct TrainConfig {
  Stage stage = Stage::kBaseline;
  double alpha = 0.5;                 // internal-LM loss weight (ilmt)
  double rho = 0.2;                   // KLD regularization weight (ilma)
  AdaptScope scope = AdaptScope::kJoinerNB;
  OptimizerConfig opt;
  int64_t epochs = 12;
  int64_t batch_size = 16;
  uint64_t seed = 17;
  double holdout_fraction = 0.1;      // adaptation-text slice for checkpoint selection

  void validate() const {
    if (alpha < 0.0) throw ConfigError("train: alpha must be >= 0");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("train: rho must lie in [0, 1]");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
      throw ConfigError("train: holdout_fraction must lie in [0, 1)");
  }
};

struct EpochRow {
  int64_t epoch = 0;
  double train_per_tok = 0.0;
  double e2e_per_tok = 0.0;
  double ilm_per_tok = 0.0;
  double val_per_tok = 0.0;
  double ppl = 0.0;
};

struct TrainResult {
  TransducerModel model;
  bool diverged = false;
  std::vector<EpochRow> history;
};

namespace detail {

inline void shuffle_indices(std::vector<size_t> &idx, Rng &rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.below(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

inline void log_row(std::ostream *log, const char *stage, const EpochRow &r) {
  if (!log) return;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s\t%lld\t%.10g\t%.10g\t%.10g\t%.10g\t%.10g\n", stage,
                static_cast<long long>(r.epoch), r.train_per_tok, r.e2e_per_tok, r.ilm_per_tok,
                r.val_per_tok, r.ppl);
  (*log) << buf;
}

// Forward-only evaluation helpers.
inline double eval_e2e_per_tok(TransducerModel &m, std::span<const Utterance> data) {
  double loss = 0.0;
  int64_t toks = 0;
  for (const auto &u : data) {
    loss += transducer_loss(m, u.feats, u.transcript).value;
    toks += static_cast<int64_t>(u.transcript.size()) + 1;  // + final blank
  }
  return toks > 0 ? loss / static_cast<double>(toks) : 0.0;
}

inline double eval_ilm_per_tok(TransducerModel &m, const std::vector<TokenSeq> &text) {
  if (text.empty()) return 0.0;
  const LossValue lv = ilm_corpus_loss(m, text);
  return lv.per_token();
}

}  // namespace detail

// Shared loop for the two paired-data stages.
inline TrainResult train_transducer_stage(TransducerModel model,
                                          std::span<const Utterance> train,
                                          std::span<const Utterance> val, const TrainConfig &cfg,
                                          std::ostream *log) {
  cfg.validate();
  if (train.empty()) throw InputError("train: empty training set");
  TrainResult result{std::move(model)};
  TransducerModel &m = result.model;
  MomentOptimizer opt(m.params, cfg.opt);
  const UpdateMask mask = UpdateMask::all(m.params);
  Rng shuffle_rng(Rng::mix(cfg.seed, 0x5f0fULL));
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  ParamStore last_finite = m.params;
  const char *stage = cfg.stage == Stage::kIlmt ? "ilmt" : "baseline";

  std::vector<TokenSeq> val_text;
  for (const auto &u : val) val_text.push_back(u.transcript);

  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    detail::shuffle_indices(order, shuffle_rng);
    double ep_e2e = 0.0, ep_ilm = 0.0;
    int64_t ep_toks = 0;
    bool finite = true;
    for (size_t begin = 0; begin < order.size() && finite;
         begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      Graph g;
      TapedParams tp = m.bind(g);
      std::vector<Graph::Id> terms;
      for (size_t k = begin; k < end; ++k) {
        const Utterance &u = train[order[k]];
        const Graph::Id e2e = build_transducer_nll(g, tp, m, u.feats, u.transcript);
        ep_e2e += g.scalar(e2e);
        ep_toks += static_cast<int64_t>(u.transcript.size()) + 1;
        if (cfg.stage == Stage::kIlmt && !u.transcript.empty()) {
          const Graph::Id ilm = build_ilm_nll(g, tp, m, u.transcript);
          ep_ilm += g.scalar(ilm);
          terms.push_back(g.sum_scalars(std::array{e2e, g.scale(ilm, cfg.alpha)}));
        } else {
          terms.push_back(e2e);
        }
      }
      const Graph::Id root = g.sum_scalars(terms);
      if (!std::isfinite(g.scalar(root))) {
        finite = false;
        break;
      }
      m.params.zero_grads();
      g.backward(root);
      opt.step(m.params, mask);
    }
    if (!finite) {
      m.params = last_finite;  // abort with the last finite checkpoint
      result.diverged = true;
      break;
    }
    last_finite = m.params;

    EpochRow row;
    row.epoch = epoch;
    row.e2e_per_tok = ep_toks > 0 ? ep_e2e / static_cast<double>(ep_toks) : 0.0;
    row.ilm_per_tok = ep_toks > 0 ? ep_ilm / static_cast<double>(ep_toks) : 0.0;
    row.train_per_tok = row.e2e_per_tok + cfg.alpha * row.ilm_per_tok;
    row.val_per_tok = detail::eval_e2e_per_tok(m, val);
    row.ppl = val_text.empty() ? 0.0 : std::exp(detail::eval_ilm_per_tok(m, val_text));
    result.history.push_back(row);
    detail::log_row(log, stage, row);
  }
  return result;
}

// Baseline: minimize the transducer loss from a fresh seed.
inline TrainResult train_baseline(const ModelConfig &mc, const Vocab &vocab,
                                  std::span<const Utterance> train,
                                  std::span<const Utterance> val, TrainConfig cfg,
                                  std::ostream *log = nullptr) {
  cfg.stage = Stage::kBaseline;
  return train_transducer_stage(TransducerModel::create(mc, vocab, cfg.seed), train, val, cfg,
                                log);
}

// Joint training with the added internal-LM term. alpha = 0 reproduces
// train_baseline bit-exactly under the same seed.
inline TrainResult train_ilmt(const ModelConfig &mc, const Vocab &vocab,
                              std::span<const Utterance> train, std::span<const Utterance> val,
                              TrainConfig cfg, std::ostream *log = nullptr) {
  cfg.stage = Stage::kIlmt;
  return train_transducer_stage(TransducerModel::create(mc, vocab, cfg.seed), train, val, cfg,
                                log);
}

// Text-only adaptation. Snapshots the model before the first step; the
// snapshot provides every KLD reference distribution, and the best epoch
// by held-out adaptation cross-entropy is returned. Acoustic features are
// never read on this path.
inline TrainResult adapt_ilma(const TransducerModel &base, const std::vector<TokenSeq> &adapt_text,
                              TrainConfig cfg, std::ostream *log = nullptr) {
  cfg.stage = Stage::kIlma;
  cfg.validate();
  if (adapt_text.empty()) throw ConfigError("ilma: empty adaptation corpus");

  const size_t n_hold = static_cast<size_t>(
      std::floor(static_cast<double>(adapt_text.size()) * cfg.holdout_fraction));
  const size_t n_train = adapt_text.size() - n_hold;
  if (n_train == 0) throw ConfigError("ilma: holdout fraction leaves no adaptation data");
  const std::vector<TokenSeq> train_text(adapt_text.begin(),
                                         adapt_text.begin() + static_cast<ptrdiff_t>(n_train));
  const std::vector<TokenSeq> holdout_text(adapt_text.begin() + static_cast<ptrdiff_t>(n_train),
                                           adapt_text.end());
  const std::vector<TokenSeq> &select_text = holdout_text.empty() ? train_text : holdout_text;

  TrainResult result{base};
  TransducerModel &m = result.model;
  const TransducerModel ref = base;  // frozen reference for all KLD targets
  MomentOptimizer opt(m.params, cfg.opt);
  const UpdateMask mask = UpdateMask::for_scope(m, cfg.scope);
  Rng shuffle_rng(Rng::mix(cfg.seed, 0xadabfULL));
  std::vector<size_t> order(train_text.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  ParamStore best = m.params;
  double best_ce = std::numeric_limits<double>::infinity();
  ParamStore last_finite = m.params;

  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    detail::shuffle_indices(order, shuffle_rng);
    double ep_loss = 0.0;
    int64_t ep_toks = 0;
    bool finite = true;
    for (size_t begin = 0; begin < order.size() && finite;
         begin += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(cfg.batch_size));
      Graph g;
      TapedParams tp = m.bind(g);
      std::vector<Graph::Id> terms;
      for (size_t k = begin; k < end; ++k) {
        const TokenSeq &y = train_text[order[k]];
        if (y.empty()) continue;
        terms.push_back(build_ilma_nll(g, tp, m, y, ilma_target_rows(ref, y, cfg.rho)));
        ep_toks += static_cast<int64_t>(y.size());
      }
      if (terms.empty()) continue;
      const Graph::Id root = g.sum_scalars(terms);
      ep_loss += g.scalar(root);
      if (!std::isfinite(g.scalar(root))) {
        finite = false;
        break;
      }
      m.params.zero_grads();
      g.backward(root);
      opt.step(m.params, mask);
    }
    if (!finite) {
      m.params = last_finite;
      result.diverged = true;
      break;
    }
    last_finite = m.params;

    const double hold_ce = detail::eval_ilm_per_tok(m, select_text);
    if (hold_ce < best_ce) {
      best_ce = hold_ce;
      best = m.params;
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_per_tok = ep_toks > 0 ? ep_loss / static_cast<double>(ep_toks) : 0.0;
    row.ilm_per_tok = row.train_per_tok;
    row.val_per_tok = hold_ce;
    row.ppl = std::exp(hold_ce);
    result.history.push_back(row);
    detail::log_row(log, "ilma", row);
  }
  m.params = best;
  return result;
}

}  // namespace ilma
