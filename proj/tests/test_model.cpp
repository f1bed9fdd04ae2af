// tests/test_model.cpp
//
// Copyright (c)  2026  ilmalab authors

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "helpers.hpp"
#include "ilma/model.hpp"

using namespace ilma;
using testing::make_vocab;
using testing::random_feats;
using testing::tiny_config;
using testing::tiny_model;
using testing::zero_params;

TEST_CASE("vocab rejects duplicates and the blank symbol", "[model][vocab]") {
  REQUIRE_THROWS_AS(Vocab({"a", "a"}), InputError);
  REQUIRE_THROWS_AS(Vocab({"a", "<b>"}), InputError);
  const Vocab v({"a", "b", "c"});
  REQUIRE(v.size() == 3);
  REQUIRE(v.full_size() == 4);
  REQUIRE(v.blank_id() == 3);
  REQUIRE(v.id("b") == 1);
  REQUIRE_THROWS_AS(v.id("zz"), InputError);
}

TEST_CASE("encode shape contract with subsampling", "[model][encode]") {
  auto m = tiny_model();
  Rng rng(1);
  REQUIRE(m.encode(random_feats(4, 3, rng)).shape[0] == 2);   // T=4, subsample 2 -> T'=2
  REQUIRE(m.encode(random_feats(5, 3, rng)).shape[0] == 3);   // ceil(5/2)
  REQUIRE(m.encode(random_feats(1, 3, rng)).shape[0] == 1);
}

TEST_CASE("encode rejects empty or mismatched input", "[model][encode]") {
  auto m = tiny_model();
  Rng rng(1);
  REQUIRE_THROWS_AS(m.encode(Tensor({1}, {0.0})), InputError);
  REQUIRE_THROWS_AS(m.encode(random_feats(3, 4, rng)), InputError);
}

TEST_CASE("zero weights give all-zero hidden states", "[model][encode]") {
  auto m = tiny_model();
  zero_params(m);
  Rng rng(2);
  const Tensor h = m.encode(random_feats(6, 3, rng));
  for (double v : h.data) REQUIRE(v == 0.0);
}

TEST_CASE("encode is bit-deterministic under a fixed seed", "[model][encode][determinism]") {
  Rng rng(3);
  const Tensor x = random_feats(7, 3, rng);
  auto a = tiny_model(3, 99);
  auto b = tiny_model(3, 99);
  REQUIRE(testing::same_bits(a.encode(x).data, b.encode(x).data));
}

TEST_CASE("predict: start state is stable and prefix-deterministic", "[model][predict]") {
  auto m = tiny_model();
  const DecoderState s1 = m.start_state();
  const DecoderState s2 = m.start_state();
  REQUIRE(testing::same_bits(s1.h.data, s2.h.data));

  const TokenSeq prefix = {0, 1, 2};
  const DecoderState a = m.predict_prefix(prefix);
  const DecoderState b = m.predict_prefix(prefix);
  REQUIRE(testing::same_bits(a.h.data, b.h.data));
}

TEST_CASE("incremental predictor equals one-shot taped unroll bit-exactly",
          "[model][predict]") {
  auto m = tiny_model();
  const TokenSeq y = {0, 1, 2, 1};
  // step-by-step through the raw path
  DecoderState s = m.start_state();
  std::vector<std::vector<double>> raw_states = {s.h.data};
  for (int32_t tok : y) {
    s = m.predictor_step(s, tok);
    raw_states.push_back(s.h.data);
  }
  // one-shot through the taped path
  Graph g;
  const TapedParams tp = m.bind(g);
  const Graph::Id states = m.tape_predictor_states(g, tp, y, static_cast<int64_t>(y.size()) + 1);
  for (size_t i = 0; i < raw_states.size(); ++i) {
    const auto row = g.value(states).row(static_cast<int64_t>(i));
    REQUIRE(testing::same_bits(raw_states[i], std::vector<double>(row.begin(), row.end())));
  }
}

TEST_CASE("same last token, different history gives different predictor state",
          "[model][predict]") {
  auto m = tiny_model();
  const DecoderState a = m.predict_prefix({0, 2});
  const DecoderState b = m.predict_prefix({1, 2});
  REQUIRE(!testing::same_bits(a.h.data, b.h.data));
}

TEST_CASE("blank or unknown token in prefix is rejected", "[model][predict]") {
  auto m = tiny_model();
  REQUIRE_THROWS_AS(m.predictor_step(m.start_state(), m.vocab.blank_id()), InputError);
  REQUIRE_THROWS_AS(m.predictor_step(m.start_state(), -1), InputError);
}

TEST_CASE("joint logits: all-zero parameters give the uniform distribution",
          "[model][joint]") {
  auto m = tiny_model();
  zero_params(m);
  Rng rng(4);
  const Tensor enc = m.encode(random_feats(2, 3, rng));
  const Tensor logits = m.joint_logits(enc.row(0), m.start_state());
  REQUIRE(logits.numel() == m.vocab.full_size());
  for (double v : logits.data) REQUIRE(v == 0.0);
  Tensor logp({1, static_cast<int64_t>(m.vocab.full_size())});
  kern::log_softmax(logits, logp);
  for (double v : logp.data)
    REQUIRE(std::exp(v) == Catch::Approx(1.0 / m.vocab.full_size()).epsilon(1e-14));
}

TEST_CASE("joint logits match hand arithmetic on a one-dimensional instance",
          "[model][joint]") {
  ModelConfig cfg;
  cfg.feature_dim = 1;
  cfg.encoder_hidden = 1;
  cfg.encoder_layers = 1;
  cfg.subsample = 1;
  cfg.embed_dim = 1;
  cfg.predictor_hidden = 1;
  cfg.joint_dim = 1;
  auto m = TransducerModel::create(cfg, make_vocab(1), 5);
  m.params.at("joiner.w_e").data = {0.5};
  m.params.at("joiner.b_e").data = {0.1};
  m.params.at("joiner.w_p").data = {-0.3};
  m.params.at("joiner.b_p").data = {0.2};
  m.params.at("joiner.w_j").data = {0.7, -0.4};
  m.params.at("joiner.b_j").data = {0.05, -0.02};

  const double h_enc = 0.6, h_pred = 0.4;
  DecoderState st{Tensor({1, 1}, {h_pred})};
  const std::vector<double> enc_row = {h_enc};
  const Tensor logits = m.joint_logits(enc_row, st);

  const double phi = std::tanh(0.5 * h_enc + 0.1 + (-0.3 * h_pred + 0.2));
  REQUIRE(logits.data[0] == Catch::Approx(0.7 * phi + 0.05).epsilon(1e-15));
  REQUIRE(logits.data[1] == Catch::Approx(-0.4 * phi - 0.02).epsilon(1e-15));
}

TEST_CASE("output dimension is 4000 with a 3999-token vocabulary", "[model][joint]") {
  ModelConfig cfg = tiny_config();
  auto m = TransducerModel::create(cfg, make_vocab(3999), 6);
  REQUIRE(m.params.at("joiner.w_j").shape[0] == 4000);
  Rng rng(6);
  const Tensor enc = m.encode(random_feats(2, 3, rng));
  REQUIRE(m.joint_logits(enc.row(0), m.start_state()).numel() == 4000);
  REQUIRE(m.ilm_logits(m.start_state()).numel() == 3999);
}

TEST_CASE("ilm logits: uniform over the non-blank set for zero parameters",
          "[model][ilm]") {
  auto m = tiny_model();
  zero_params(m);
  const Tensor logits = m.ilm_logits(m.start_state());
  REQUIRE(logits.numel() == m.vocab.size());
  Tensor logp({1, static_cast<int64_t>(m.vocab.size())});
  kern::log_softmax(logits, logp);
  for (double v : logp.data)
    REQUIRE(std::exp(v) == Catch::Approx(1.0 / m.vocab.size()).epsilon(1e-14));
}

TEST_CASE("ilm equals non-blank joint rows when the encoder side is zeroed",
          "[model][ilm]") {
  auto m = tiny_model();
  std::fill(m.params.at("joiner.w_e").data.begin(), m.params.at("joiner.w_e").data.end(), 0.0);
  std::fill(m.params.at("joiner.b_e").data.begin(), m.params.at("joiner.b_e").data.end(), 0.0);
  Rng rng(7);
  const Tensor enc = m.encode(random_feats(2, 3, rng));
  const DecoderState st = m.predict_prefix({1});
  const Tensor joint = m.joint_logits(enc.row(0), st);
  const Tensor ilm = m.ilm_logits(st);
  for (int32_t k = 0; k < m.vocab.size(); ++k)
    REQUIRE(ilm.data[static_cast<size_t>(k)] == joint.data[static_cast<size_t>(k)]);
}

TEST_CASE("ilm is not joint-minus-blank for generic parameters", "[model][ilm]") {
  auto m = tiny_model();
  Rng rng(8);
  const Tensor enc = m.encode(random_feats(2, 3, rng));
  const DecoderState st = m.predict_prefix({1});
  const Tensor joint = m.joint_logits(enc.row(0), st);
  const Tensor ilm = m.ilm_logits(st);
  bool all_equal = true;
  for (int32_t k = 0; k < m.vocab.size(); ++k)
    all_equal = all_equal && ilm.data[static_cast<size_t>(k)] == joint.data[static_cast<size_t>(k)];
  REQUIRE(!all_equal);
}

TEST_CASE("ilm never reads w_e, b_e or the blank output row", "[model][ilm][invariant]") {
  auto m = tiny_model();
  const TokenSeq y = {0, 1, 2};
  const Tensor before = m.ilm_logits(m.predict_prefix({0, 1}));
  const double lp_before = m.ilm_sequence_logprob(y);

  // perturb everything the internal LM must not depend on
  for (double &v : m.params.at("joiner.w_e").data) v += 3.5;
  for (double &v : m.params.at("joiner.b_e").data) v -= 1.25;
  auto &wj = m.params.at("joiner.w_j");
  for (auto it = wj.row(m.vocab.blank_id()).begin(); it != wj.row(m.vocab.blank_id()).end(); ++it)
    *it += 7.0;
  m.params.at("joiner.b_j").data[static_cast<size_t>(m.vocab.blank_id())] += 2.0;

  const Tensor after = m.ilm_logits(m.predict_prefix({0, 1}));
  REQUIRE(testing::same_bits(before.data, after.data));
  const double lp_after = m.ilm_sequence_logprob(y);
  REQUIRE(std::memcmp(&lp_before, &lp_after, sizeof(double)) == 0);
}

TEST_CASE("ilm distribution sums to one at every step", "[model][ilm][invariant]") {
  auto m = tiny_model(5, 11);
  DecoderState s = m.start_state();
  const TokenSeq y = {0, 3, 1, 4, 2};
  for (int32_t tok : y) {
    Tensor logp({1, static_cast<int64_t>(m.vocab.size())});
    kern::log_softmax(m.ilm_logits(s), logp);
    double sum = 0.0;
    for (double v : logp.data) sum += std::exp(v);
    REQUIRE(std::fabs(sum - 1.0) < 1e-12);
    s = m.predictor_step(s, tok);
  }
}

TEST_CASE("ilm sequence logprob: uniform model closed form and chain rule",
          "[model][ilm]") {
  auto m = tiny_model(3);
  zero_params(m);
  const TokenSeq y = {0, 1, 2, 0};
  REQUIRE(m.ilm_sequence_logprob(y) ==
          Catch::Approx(-4.0 * std::log(3.0)).epsilon(1e-14));

  auto gen = tiny_model(3, 21);
  const double whole = gen.ilm_sequence_logprob({0, 1});
  const double step_a = gen.ilm_step_logprob(gen.start_state(), 0);
  const double step_b = gen.ilm_step_logprob(gen.predict_prefix({0}), 1);
  const double sum = step_a + step_b;
  REQUIRE(std::memcmp(&whole, &sum, sizeof(double)) == 0);

  REQUIRE_THROWS_AS(gen.ilm_sequence_logprob({}), InputError);
  REQUIRE_THROWS_AS(gen.ilm_sequence_logprob({99}), InputError);
  REQUIRE(gen.ilm_sequence_logprob({0, 1, 2}) <= 0.0);
}

TEST_CASE("single-token sequence matches an independent hand computation",
          "[model][ilm]") {
  auto m = tiny_model(2, 31);
  // independent recomputation of one softmax step from raw parameter reads
  const Tensor &wp = m.params.at("joiner.w_p");
  const Tensor &bp = m.params.at("joiner.b_p");
  const Tensor &wj = m.params.at("joiner.w_j");
  const Tensor &bj = m.params.at("joiner.b_j");
  const Tensor h0 = m.params.at("predictor.h0");
  std::vector<double> phi(static_cast<size_t>(m.cfg.joint_dim));
  for (int64_t j = 0; j < m.cfg.joint_dim; ++j) {
    double acc = 0.0;
    for (int64_t l = 0; l < m.cfg.predictor_hidden; ++l) acc += h0.at(0, l) * wp.at(j, l);
    phi[static_cast<size_t>(j)] = std::tanh(acc + bp.at(j));
  }
  std::vector<double> z(2);
  for (int64_t k = 0; k < 2; ++k) {
    double acc = 0.0;
    for (int64_t j = 0; j < m.cfg.joint_dim; ++j) acc += phi[static_cast<size_t>(j)] * wj.at(k, j);
    z[static_cast<size_t>(k)] = acc + bj.at(k);
  }
  const double lse = std::log(std::exp(z[0]) + std::exp(z[1]));
  REQUIRE(m.ilm_sequence_logprob({1}) == Catch::Approx(z[1] - lse).epsilon(1e-12));
}
