// ilma/model.hpp
//
// Copyright (c)  2026  ilmalab authors
//
// Transducer model: encoder, prediction network and joint network, plus
// the internal-LM view obtained by deleting the encoder contribution and
// the blank output row. Forward math exists in two forms that share the
// same kernels: a raw path for inference and taped builders for training.

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ilma/graph.hpp"
#include "ilma/kernels.hpp"
#include "ilma/tensor.hpp"

namespace ilma {

using TokenSeq = std::vector<int32_t>;

// One paired training example: acoustic features [T x d] and transcript.
struct Utterance {
  Tensor feats;
  TokenSeq transcript;
};

enum class Act : uint8_t { kTanh, kRelu };

inline std::string act_name(Act a) { return a == Act::kTanh ? "tanh" : "relu"; }
inline Act act_from_name(const std::string &s) {
  if (s == "tanh") return Act::kTanh;
  if (s == "relu") return Act::kRelu;
  throw ConfigError("unknown activation '" + s + "' (expected tanh or relu)");
}

// The non-blank token set plus the reserved blank index, always last so
// the non-blank view of the output layer is a contiguous row slice.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    std::set<std::string> seen;
    for (const auto &t : tokens_) {
      if (t == blank_symbol()) throw InputError("vocab: blank symbol cannot be a member token");
      if (!seen.insert(t).second) throw InputError("vocab: duplicate token '" + t + "'");
    }
  }

  static const char *blank_symbol() { return "<b>"; }

  int32_t size() const { return static_cast<int32_t>(tokens_.size()); }  // |V|, non-blank
  int32_t full_size() const { return size() + 1; }                       // |V| + 1
  int32_t blank_id() const { return size(); }

  const std::string &token(int32_t id) const {
    if (id < 0 || id >= size()) throw IndexError("vocab: token id out of range");
    return tokens_[static_cast<size_t>(id)];
  }

  int32_t id(const std::string &tok) const {
    for (int32_t i = 0; i < size(); ++i) {
      if (tokens_[static_cast<size_t>(i)] == tok) return i;
    }
    throw InputError("vocab: unknown token '" + tok + "'");
  }

  const std::vector<std::string> &tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
};

struct ModelConfig {
  int64_t feature_dim = 8;
  int64_t encoder_hidden = 64;
  int64_t encoder_layers = 2;
  int64_t subsample = 2;
  int64_t embed_dim = 32;
  int64_t predictor_hidden = 64;
  int64_t joint_dim = 64;
  Act act = Act::kTanh;
};

// Named tensors in fixed registration order; the order defines gradient
// accumulation, optimizer traversal and serialization layout.
class ParamStore {
 public:
  Tensor &add(const std::string &name, std::vector<int64_t> shape) {
    if (find(name)) throw InputError("param '" + name + "' registered twice");
    items_.emplace_back(name, Tensor(std::move(shape)));
    return items_.back().second;
  }

  Tensor *find(const std::string &name) {
    for (auto &kv : items_) {
      if (kv.first == name) return &kv.second;
    }
    return nullptr;
  }
  const Tensor *find(const std::string &name) const {
    return const_cast<ParamStore *>(this)->find(name);
  }

  Tensor &at(const std::string &name) {
    Tensor *t = find(name);
    if (!t) throw InputError("unknown param '" + name + "'");
    return *t;
  }
  const Tensor &at(const std::string &name) const {
    return const_cast<ParamStore *>(this)->at(name);
  }

  size_t size() const { return items_.size(); }
  std::pair<std::string, Tensor> &item(size_t i) { return items_[i]; }
  const std::pair<std::string, Tensor> &item(size_t i) const { return items_[i]; }

  void zero_grads() {
    for (auto &kv : items_) {
      kv.second.ensure_grad();
      kv.second.zero_grad();
    }
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto &kv : items_) n += kv.second.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Predictor hidden state after consuming a non-blank prefix; a pure
// function of the prefix and the parameters.
struct DecoderState {
  Tensor h;  // [1 x predictor_hidden]
};

// Graph bindings for every parameter, created once per training step.
struct TapedParams {
  std::vector<Graph::Id> enc_wx, enc_wh, enc_b;
  Graph::Id embed{}, pred_wx{}, pred_wh{}, pred_b{}, pred_h0{};
  Graph::Id w_e{}, b_e{}, w_p{}, b_p{}, w_j{}, b_j{};
};

class TransducerModel {
 public:
  ModelConfig cfg;
  Vocab vocab;
  ParamStore params;
  // Structural instrumentation: lets tests assert that text-only paths
  // never invoke the encoder.
  mutable uint64_t encode_calls = 0;

  static TransducerModel create(ModelConfig cfg, Vocab vocab, uint64_t seed) {
    TransducerModel m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    Rng rng(seed);
    const int64_t v = m.vocab.size();
    for (int64_t l = 0; l < cfg.encoder_layers; ++l) {
      const int64_t in_dim = l == 0 ? cfg.feature_dim : cfg.encoder_hidden;
      auto &wx = m.params.add(enc_name(l, "w_x"), {cfg.encoder_hidden, in_dim});
      init_linear(wx, rng, in_dim, cfg.encoder_hidden);
      auto &wh = m.params.add(enc_name(l, "w_h"), {cfg.encoder_hidden, cfg.encoder_hidden});
      init_linear(wh, rng, cfg.encoder_hidden, cfg.encoder_hidden);
      m.params.add(enc_name(l, "b"), {cfg.encoder_hidden});
    }
    auto &emb = m.params.add("predictor.embed", {v, cfg.embed_dim});
    init_normal(emb, rng, 0.1);
    auto &pwx = m.params.add("predictor.w_x", {cfg.predictor_hidden, cfg.embed_dim});
    init_linear(pwx, rng, cfg.embed_dim, cfg.predictor_hidden);
    auto &pwh = m.params.add("predictor.w_h", {cfg.predictor_hidden, cfg.predictor_hidden});
    init_linear(pwh, rng, cfg.predictor_hidden, cfg.predictor_hidden);
    m.params.add("predictor.b", {cfg.predictor_hidden});
    m.params.add("predictor.h0", {1, cfg.predictor_hidden});  // learned start state
    auto &we = m.params.add("joiner.w_e", {cfg.joint_dim, cfg.encoder_hidden});
    init_linear(we, rng, cfg.encoder_hidden, cfg.joint_dim);
    m.params.add("joiner.b_e", {cfg.joint_dim});
    auto &wp = m.params.add("joiner.w_p", {cfg.joint_dim, cfg.predictor_hidden});
    init_linear(wp, rng, cfg.predictor_hidden, cfg.joint_dim);
    m.params.add("joiner.b_p", {cfg.joint_dim});
    auto &wj = m.params.add("joiner.w_j", {v + 1, cfg.joint_dim});
    init_linear(wj, rng, cfg.joint_dim, v + 1);
    m.params.add("joiner.b_j", {v + 1});
    return m;
  }

  static std::string enc_name(int64_t layer, const char *suffix) {
    return "encoder.l" + std::to_string(layer) + "." + suffix;
  }

  // ---- raw inference path ----

  // [T x d] -> [T' x encoder_hidden], T' = ceil(T / subsample)
  Tensor encode(const Tensor &feats) const {
    ++encode_calls;
    if (feats.ndim() != 2 || feats.shape[0] < 1)
      throw InputError("encode: empty or non-matrix feature input");
    if (feats.shape[1] != cfg.feature_dim)
      throw InputError("encode: feature dim " + std::to_string(feats.shape[1]) +
                       " does not match configured " + std::to_string(cfg.feature_dim));
    Tensor cur = feats;
    for (int64_t l = 0; l < cfg.encoder_layers; ++l) {
      const Tensor &wx = params.at(enc_name(l, "w_x"));
      const Tensor &wh = params.at(enc_name(l, "w_h"));
      const Tensor &b = params.at(enc_name(l, "b"));
      const int64_t t_in = cur.shape[0];
      Tensor out({t_in, cfg.encoder_hidden});
      Tensor h({1, cfg.encoder_hidden});
      Tensor xrow({1, cur.shape[1]}), a({1, cfg.encoder_hidden}), c({1, cfg.encoder_hidden}),
          pre({1, cfg.encoder_hidden});
      for (int64_t t = 0; t < t_in; ++t) {
        std::copy(cur.row(t).begin(), cur.row(t).end(), xrow.data.begin());
        kern::linear(xrow, wx, &b, 0, cfg.encoder_hidden, a);
        kern::linear(h, wh, nullptr, 0, cfg.encoder_hidden, c);
        kern::add(a, c, pre);
        apply_act(pre, h);
        std::copy(h.data.begin(), h.data.end(), out.row(t).begin());
      }
      if (l == 0 && cfg.subsample > 1) {
        const int64_t t_out = (t_in + cfg.subsample - 1) / cfg.subsample;
        Tensor sub({t_out, cfg.encoder_hidden});
        for (int64_t t = 0; t < t_out; ++t) {
          auto src = out.row(t * cfg.subsample);
          std::copy(src.begin(), src.end(), sub.row(t).begin());
        }
        cur = std::move(sub);
      } else {
        cur = std::move(out);
      }
    }
    return cur;
  }

  DecoderState start_state() const { return DecoderState{params.at("predictor.h0")}; }

  DecoderState predictor_step(const DecoderState &state, int32_t token) const {
    check_token(token);
    const Tensor &emb = params.at("predictor.embed");
    Tensor xrow({1, cfg.embed_dim});
    std::copy(emb.row(token).begin(), emb.row(token).end(), xrow.data.begin());
    Tensor a({1, cfg.predictor_hidden}), c({1, cfg.predictor_hidden}),
        pre({1, cfg.predictor_hidden});
    kern::linear(xrow, params.at("predictor.w_x"), &params.at("predictor.b"), 0,
                 cfg.predictor_hidden, a);
    kern::linear(state.h, params.at("predictor.w_h"), nullptr, 0, cfg.predictor_hidden, c);
    kern::add(a, c, pre);
    DecoderState next{Tensor({1, cfg.predictor_hidden})};
    apply_act(pre, next.h);
    return next;
  }

  DecoderState predict_prefix(const TokenSeq &prefix) const {
    DecoderState s = start_state();
    for (int32_t tok : prefix) s = predictor_step(s, tok);
    return s;
  }

  // [T' x h] -> [T' x J], the encoder side of the joint input
  Tensor enc_projection(const Tensor &enc) const {
    Tensor out({enc.shape[0], cfg.joint_dim});
    kern::linear(enc, params.at("joiner.w_e"), &params.at("joiner.b_e"), 0, cfg.joint_dim, out);
    return out;
  }

  Tensor pred_projection(const DecoderState &state) const {
    Tensor out({1, cfg.joint_dim});
    kern::linear(state.h, params.at("joiner.w_p"), &params.at("joiner.b_p"), 0, cfg.joint_dim,
                 out);
    return out;
  }

  // Full logit vector over V union blank from precomputed projections.
  Tensor joint_from_projections(std::span<const double> proj_e,
                                std::span<const double> proj_p) const {
    Tensor a({1, cfg.joint_dim}), p({1, cfg.joint_dim}), s({1, cfg.joint_dim}),
        phi({1, cfg.joint_dim});
    std::copy(proj_e.begin(), proj_e.end(), a.data.begin());
    std::copy(proj_p.begin(), proj_p.end(), p.data.begin());
    kern::add(a, p, s);
    apply_act(s, phi);
    Tensor logits({1, static_cast<int64_t>(vocab.full_size())});
    kern::linear(phi, params.at("joiner.w_j"), &params.at("joiner.b_j"), 0, vocab.full_size(),
                 logits);
    return logits;
  }

  Tensor joint_logits(std::span<const double> h_enc, const DecoderState &state) const {
    if (static_cast<int64_t>(h_enc.size()) != cfg.encoder_hidden)
      throw DimError("joint_logits: encoder state size mismatch");
    Tensor enc({1, cfg.encoder_hidden});
    std::copy(h_enc.begin(), h_enc.end(), enc.data.begin());
    const Tensor pe = enc_projection(enc);
    const Tensor pp = pred_projection(state);
    return joint_from_projections(pe.data, pp.data);
  }

  // Non-blank logits with the encoder term and encoder bias both omitted.
  // Reads the non-blank rows of the output layer in place; the blank row,
  // w_e and b_e are never touched on this path.
  Tensor ilm_logits(const DecoderState &state) const {
    Tensor p({1, cfg.joint_dim}), phi({1, cfg.joint_dim});
    kern::linear(state.h, params.at("joiner.w_p"), &params.at("joiner.b_p"), 0, cfg.joint_dim, p);
    apply_act(p, phi);
    Tensor logits({1, static_cast<int64_t>(vocab.size())});
    kern::linear(phi, params.at("joiner.w_j"), &params.at("joiner.b_j"), 0, vocab.size(), logits);
    return logits;
  }

  // log P(token | state) under the internal LM.
  double ilm_step_logprob(const DecoderState &state, int32_t token) const {
    check_token(token);
    const Tensor logits = ilm_logits(state);
    Tensor logp({1, static_cast<int64_t>(vocab.size())});
    kern::log_softmax(logits, logp);
    return logp.data[static_cast<size_t>(token)];
  }

  // Sum over positions of the internal-LM log-probability of the sequence.
  double ilm_sequence_logprob(const TokenSeq &y) const {
    if (y.empty()) throw InputError("ilm_sequence_logprob: empty sequence");
    DecoderState s = start_state();
    double acc = 0.0;
    for (int32_t tok : y) {
      acc += ilm_step_logprob(s, tok);
      s = predictor_step(s, tok);
    }
    return acc;
  }

  // ---- taped builders (training path) ----

  TapedParams bind(Graph &g) {
    TapedParams tp;
    for (int64_t l = 0; l < cfg.encoder_layers; ++l) {
      tp.enc_wx.push_back(g.leaf(&params.at(enc_name(l, "w_x"))));
      tp.enc_wh.push_back(g.leaf(&params.at(enc_name(l, "w_h"))));
      tp.enc_b.push_back(g.leaf(&params.at(enc_name(l, "b"))));
    }
    tp.embed = g.leaf(&params.at("predictor.embed"));
    tp.pred_wx = g.leaf(&params.at("predictor.w_x"));
    tp.pred_wh = g.leaf(&params.at("predictor.w_h"));
    tp.pred_b = g.leaf(&params.at("predictor.b"));
    tp.pred_h0 = g.leaf(&params.at("predictor.h0"));
    tp.w_e = g.leaf(&params.at("joiner.w_e"));
    tp.b_e = g.leaf(&params.at("joiner.b_e"));
    tp.w_p = g.leaf(&params.at("joiner.w_p"));
    tp.b_p = g.leaf(&params.at("joiner.b_p"));
    tp.w_j = g.leaf(&params.at("joiner.w_j"));
    tp.b_j = g.leaf(&params.at("joiner.b_j"));
    return tp;
  }

  // Same recurrence as encode(), on the tape. Returns [T' x h].
  Graph::Id tape_encode(Graph &g, const TapedParams &tp, const Tensor &feats) const {
    ++encode_calls;
    if (feats.ndim() != 2 || feats.shape[0] < 1)
      throw InputError("encode: empty or non-matrix feature input");
    if (feats.shape[1] != cfg.feature_dim)
      throw InputError("encode: feature dim mismatch");
    Graph::Id cur = g.input(feats);
    int64_t t_in = feats.shape[0];
    for (int64_t l = 0; l < cfg.encoder_layers; ++l) {
      Graph::Id h = g.input(Tensor({1, cfg.encoder_hidden}));
      std::vector<Graph::Id> rows;
      for (int64_t t = 0; t < t_in; ++t) {
        const Graph::Id xrow = g.gather_rows(cur, {static_cast<int32_t>(t)});
        const Graph::Id a = g.linear(xrow, tp.enc_wx[static_cast<size_t>(l)],
                                     static_cast<int64_t>(tp.enc_b[static_cast<size_t>(l)]));
        const Graph::Id c = g.linear(h, tp.enc_wh[static_cast<size_t>(l)]);
        h = tape_act(g, g.add(a, c));
        rows.push_back(h);
      }
      if (l == 0 && cfg.subsample > 1) {
        std::vector<Graph::Id> kept;
        for (int64_t t = 0; t < t_in; t += cfg.subsample) kept.push_back(rows[static_cast<size_t>(t)]);
        rows = std::move(kept);
      }
      cur = g.stack_rows(rows);
      t_in = static_cast<int64_t>(g.value(cur).shape[0]);
    }
    return cur;
  }

  // Predictor states s_0 .. s_{n-1}, s_0 = h0, s_i consumes y[i-1].
  // Returns [n x predictor_hidden].
  Graph::Id tape_predictor_states(Graph &g, const TapedParams &tp, const TokenSeq &y,
                                  int64_t n_states) const {
    for (int32_t tok : y) check_token(tok);
    std::vector<Graph::Id> rows;
    Graph::Id h = tp.pred_h0;
    rows.push_back(h);
    for (int64_t i = 1; i < n_states; ++i) {
      const Graph::Id emb = g.gather_rows(tp.embed, {y[static_cast<size_t>(i - 1)]});
      const Graph::Id a = g.linear(emb, tp.pred_wx, static_cast<int64_t>(tp.pred_b));
      const Graph::Id c = g.linear(h, tp.pred_wh);
      h = tape_act(g, g.add(a, c));
      rows.push_back(h);
    }
    return g.stack_rows(rows);
  }

  // Row-wise log-softmax joint outputs over the full (T' x (U+1)) grid,
  // row index t * (U+1) + u, blank in the last column.
  Graph::Id tape_joint_logprobs(Graph &g, const TapedParams &tp, Graph::Id enc,
                                Graph::Id pred_states) const {
    const Graph::Id proj_e = g.linear(enc, tp.w_e, static_cast<int64_t>(tp.b_e));
    const Graph::Id proj_p = g.linear(pred_states, tp.w_p, static_cast<int64_t>(tp.b_p));
    const Graph::Id mixed = tape_act(g, g.pair_row_sum(proj_e, proj_p));
    return g.log_softmax(g.linear(mixed, tp.w_j, static_cast<int64_t>(tp.b_j)));
  }

  // Internal-LM log-probability rows for positions 1..U: row u-1 scores
  // y_u given the prefix y_1..y_{u-1}. Encoder-free and blank-free.
  Graph::Id tape_ilm_logprobs(Graph &g, const TapedParams &tp, const TokenSeq &y) const {
    const Graph::Id states = tape_predictor_states(g, tp, y, static_cast<int64_t>(y.size()));
    const Graph::Id proj = g.linear(states, tp.w_p, static_cast<int64_t>(tp.b_p));
    const Graph::Id phi = tape_act(g, proj);
    return g.log_softmax(
        g.linear(phi, tp.w_j, static_cast<int64_t>(tp.b_j), 0, vocab.size()));
  }

  void check_token(int32_t token) const {
    if (token < 0 || token >= vocab.size())
      throw InputError("token id " + std::to_string(token) +
                       " is not a non-blank vocabulary token");
  }

 private:
  void apply_act(const Tensor &in, Tensor &out) const {
    if (cfg.act == Act::kTanh)
      kern::tanh_(in, out);
    else
      kern::relu(in, out);
  }

  Graph::Id tape_act(Graph &g, Graph::Id x) const {
    return cfg.act == Act::kTanh ? g.tanh_(x) : g.relu(x);
  }
};

}  // namespace ilma
