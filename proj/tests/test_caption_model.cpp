#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "kgcap/caption_model.hpp"
#include "oracles.hpp"

using namespace kgcap;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Scalar LSTM cell written with plain loops; gate rows i, f, o, g.
struct ScalarCell {
  std::vector<std::vector<double>> W, U;
  std::vector<double> b;

  void step(const std::vector<double>& x, std::vector<double>& h, std::vector<double>& c) const {
    const std::size_t n = h.size();
    std::vector<double> z(4 * n);
    for (std::size_t r = 0; r < 4 * n; ++r) {
      z[r] = b[r];
      for (std::size_t k = 0; k < x.size(); ++k) z[r] += W[r][k] * x[k];
      for (std::size_t k = 0; k < n; ++k) z[r] += U[r][k] * h[k];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double i = sig(z[j]), f = sig(z[n + j]), o = sig(z[2 * n + j]),
                   g = std::tanh(z[3 * n + j]);
      c[j] = f * c[j] + i * g;
      h[j] = o * std::tanh(c[j]);
    }
  }
};

ScalarCell to_scalar(const LstmParams& p) {
  ScalarCell s;
  for (Eigen::Index r = 0; r < p.W.rows(); ++r) {
    s.W.emplace_back(p.W.row(r).begin(), p.W.row(r).end());
    s.U.emplace_back(p.U.row(r).begin(), p.U.row(r).end());
    s.b.push_back(p.b[r]);
  }
  return s;
}

std::vector<double> col(const Mat& m, Eigen::Index j) {
  return std::vector<double>(m.col(j).begin(), m.col(j).end());
}

ModelDims tiny_dims(Rng& rng) {
  ModelDims d;
  d.vocab = 4 + static_cast<int>(rng.below(9));  // 4..12
  d.embed = 2 + static_cast<int>(rng.below(3));
  d.hidden = 2 + static_cast<int>(rng.below(7));  // 2..8
  d.feature = 2 + static_cast<int>(rng.below(3));
  d.term_dim = 2;
  d.encoder_input = 2 + static_cast<int>(rng.below(2));
  d.encoder_hidden = 2 + static_cast<int>(rng.below(2));
  return d;
}

Example random_example(Rng& rng, const ModelDims& d) {
  Example ex;
  ex.cond.image = Vec(d.feature);
  for (Eigen::Index k = 0; k < ex.cond.image.size(); ++k) ex.cond.image[k] = rng.uniform(-1, 1);
  for (auto* seq : {&ex.cond.direct, &ex.cond.indirect}) {
    const auto n = rng.below(4);  // 0 exercises EMPTY
    for (std::uint64_t k = 0; k < n; ++k) {
      if (rng.unit() < 0.2) {
        seq->emplace_back(std::nullopt);  // UNK
      } else {
        Vec v(d.term_dim);
        for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = rng.uniform(-1, 1);
        seq->emplace_back(v);
      }
    }
  }
  ex.tokens.push_back(Vocabulary::kStart);
  const auto words = rng.below(4);  // at most 5 tokens including START/END
  for (std::uint64_t k = 0; k < words; ++k)
    ex.tokens.push_back(static_cast<int>(2 + rng.below(d.vocab - 2)));
  ex.tokens.push_back(Vocabulary::kEnd);
  return ex;
}

}  // namespace

TEST(LstmStep, ZeroWeightsGiveHalfGatesAndZeroState) {
  auto p = LstmParams::zeros(3, 2);
  LstmStepCache cache;
  auto s = lstm_step(p, Vec::Zero(3), LstmState::zeros(2), &cache);
  EXPECT_TRUE(s.h.isZero(0));
  EXPECT_TRUE(s.c.isZero(0));
  EXPECT_DOUBLE_EQ(cache.i[0], 0.5);
  EXPECT_DOUBLE_EQ(cache.f[1], 0.5);
  EXPECT_DOUBLE_EQ(cache.o[0], 0.5);
  EXPECT_DOUBLE_EQ(cache.g[0], 0.0);
}

TEST(LstmStep, ForgetGateHalvesCell) {
  auto p = LstmParams::zeros(1, 1);
  LstmState s{Vec::Zero(1), Vec::Constant(1, 1.0)};
  auto next = lstm_step(p, Vec::Zero(1), s);
  EXPECT_DOUBLE_EQ(next.c[0], 0.5);
  EXPECT_DOUBLE_EQ(next.h[0], 0.5 * std::tanh(0.5));
}

TEST(LstmStep, Errors) {
  auto p = LstmParams::zeros(2, 2);
  EXPECT_THROW(lstm_step(p, Vec::Zero(3), LstmState::zeros(2)), ValidationError);
  Vec bad = Vec::Zero(2);
  bad[0] = NAN;
  EXPECT_THROW(lstm_step(p, bad, LstmState::zeros(2)), NumericError);
}

TEST(LstmStep, MatchesScalarCell) {
  Rng rng(5);
  LstmParams p = LstmParams::zeros(3, 4);
  p.visit([&](const char*, auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = rng.uniform(-1, 1);
  });
  Vec x(3);
  x << 0.3, -0.7, 1.1;
  LstmState s{Vec::Constant(4, 0.2), Vec::Constant(4, -0.4)};
  auto out = lstm_step(p, x, s);
  std::vector<double> h(4, 0.2), c(4, -0.4);
  to_scalar(p).step({0.3, -0.7, 1.1}, h, c);
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(out.h[j], h[j], 1e-14);
    EXPECT_NEAR(out.c[j], c[j], 1e-14);
  }
}

TEST(ForwardCaption, HandEvaluatedTinyModel) {
  // hidden 2, vocab 4, embed 2, image feature of width 1.
  ModelDims d;
  d.vocab = 4;
  d.embed = 2;
  d.hidden = 2;
  d.feature = 1;
  auto m = init_params(InputMode::Image, d, 0.9, 17);
  Vec image = Vec::Constant(1, 0.7);
  std::vector<int> caption{Vocabulary::kStart, 2, 3, Vocabulary::kEnd};
  auto rows = forward_caption(m, {image, {}, {}}, caption);
  ASSERT_EQ(rows.size(), 3u);

  auto cell = to_scalar(m.decoder);
  std::vector<double> h(2, 0.0), c(2, 0.0);
  std::vector<double> x0{m.P(0, 0) * 0.7 + m.bp[0], m.P(1, 0) * 0.7 + m.bp[1]};
  cell.step(x0, h, c);
  for (std::size_t t = 0; t < 3; ++t) {
    cell.step(col(m.We, caption[t]), h, c);
    std::vector<double> logits(4);
    double total = 0.0;
    for (int v = 0; v < 4; ++v) {
      logits[v] = m.bo[v] + m.Wo(v, 0) * h[0] + m.Wo(v, 1) * h[1];
      total += std::exp(logits[v]);
    }
    for (int v = 0; v < 4; ++v) EXPECT_NEAR(rows[t][v], std::exp(logits[v]) / total, 1e-14);
  }
}

TEST(ForwardCaption, RowsAreDistributionsInEveryMode) {
  Rng rng(3);
  for (auto mode : kAllModes) {
    auto d = tiny_dims(rng);
    auto m = init_params(mode, d, 1.0, rng.next());
    auto ex = random_example(rng, d);
    auto rows = forward_caption(m, ex.cond, ex.tokens);
    for (const auto& r : rows) {
      EXPECT_NEAR(r.sum(), 1.0, 1e-12);
      EXPECT_GT(r.minCoeff(), 0.0);
    }
    auto again = forward_caption(m, ex.cond, ex.tokens);
    for (std::size_t t = 0; t < rows.size(); ++t) EXPECT_TRUE(rows[t] == again[t]);
  }
}

TEST(ForwardCaption, Errors) {
  ModelDims d;
  d.vocab = 5;
  d.feature = 2;
  auto m = init_params(InputMode::Image, d, 0.08, 1);
  ConditionInputs cond{Vec::Zero(2), {}, {}};
  EXPECT_THROW(forward_caption(m, cond, {0, 9, 1}), ValidationError);
  EXPECT_THROW(forward_caption(m, cond, {4, 1}), ValidationError);
  EXPECT_THROW(forward_caption(m, ConditionInputs{Vec::Zero(3), {}, {}}, {0, 1}), ValidationError);
}

TEST(ForwardCaption, BaselinePathMatchesGenericPath) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto d = tiny_dims(rng);
    auto m = init_params(InputMode::Image, d, 0.5, rng.next());
    auto ex = random_example(rng, d);
    auto a = forward_caption(m, ex.cond, ex.tokens);
    auto b = forward_baseline(m, ex.cond.image, ex.tokens);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t t = 0; t < a.size(); ++t) EXPECT_TRUE(a[t] == b[t]);
  }
}

TEST(Loss, UniformPredictorGivesNLogV) {
  ModelDims d;
  d.vocab = 7;
  d.feature = 2;
  auto m = init_params(InputMode::Image, d, 0.08, 1);
  m.Wo.setZero();
  m.bo.setZero();
  std::vector<Example> batch{{{Vec::Ones(2), {}, {}}, {0, 4, 5, 1}},
                             {{Vec::Zero(2), {}, {}}, {0, 6, 4, 5, 1}}};
  // Mean of N = 3 and N = 4 predicted tokens.
  EXPECT_NEAR(loss(m, batch, 0.0), 3.5 * std::log(7.0), 1e-12);
}

TEST(Loss, NearOracleModelApproachesZero) {
  ModelDims d;
  d.vocab = 4;
  d.hidden = 2;
  d.embed = 2;
  auto m = CaptionModelParams::zeros(InputMode::None, d);
  m.bo << -50, 50, -50, -50;  // always END with probability ~1
  std::vector<Example> batch{{{}, {0, 1}}};
  EXPECT_NEAR(loss(m, batch, 0.0), 0.0, 1e-20);
  EXPECT_THROW(loss(m, {}, 0.0), ValidationError);
}

TEST(Loss, PenaltyDifferenceAndGradient) {
  Rng rng(4);
  auto d = tiny_dims(rng);
  auto m = init_params(InputMode::Full, d, 0.3, 9);
  std::vector<Example> batch{random_example(rng, d), random_example(rng, d)};
  const double lam = 0.37;
  EXPECT_NEAR(loss(m, batch, lam) - loss(m, batch, 0.0), lam * m.squared_norm(), 1e-12);
  EXPECT_GE(loss(m, batch, lam), lam * m.squared_norm());

  auto g0 = gradients(m, batch, 0.0);
  auto g1 = gradients(m, batch, lam);
  auto diff = oracle::flatten(g1);
  auto base = oracle::flatten(g0);
  auto theta = oracle::flatten(m);
  for (std::size_t k = 0; k < diff.size(); ++k)
    EXPECT_NEAR(diff[k] - base[k], 2 * lam * theta[k], 1e-12);
}

TEST(Gradients, MatchFiniteDifferencesInEveryMode) {
  Rng rng(2718);
  int configs = 0;
  for (int round = 0; round < 3; ++round)
    for (auto mode : kAllModes) {
      auto d = tiny_dims(rng);
      auto m = init_params(mode, d, 0.5, rng.next());
      std::vector<Example> batch;
      for (int k = 0; k < 2; ++k) batch.push_back(random_example(rng, d));
      const double lam = round == 0 ? 0.0 : 1e-3;
      auto analytic = oracle::flatten(gradients(m, batch, lam));
      auto numeric = oracle::finite_difference_gradient(
          m, [&](const CaptionModelParams& p) { return loss(p, batch, lam); });
      ASSERT_EQ(analytic.size(), numeric.size());
      double worst = 0.0;
      for (std::size_t k = 0; k < analytic.size(); ++k)
        worst = std::max(worst, oracle::relative_error(analytic[k], numeric[k]));
      EXPECT_LT(worst, 1e-4) << mode_name(mode) << " round " << round;
      ++configs;
    }
  EXPECT_GE(configs, 20);
}

TEST(Gradients, BatchOrderDoesNotMatter) {
  Rng rng(12);
  auto d = tiny_dims(rng);
  auto m = init_params(InputMode::Full, d, 0.3, 2);
  std::vector<Example> batch;
  for (int k = 0; k < 5; ++k) batch.push_back(random_example(rng, d));
  auto a = oracle::flatten(gradients(m, batch, 1e-4));
  std::reverse(batch.begin(), batch.end());
  std::swap(batch[0], batch[3]);
  auto b = oracle::flatten(gradients(m, batch, 1e-4));
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
}

TEST(EncodeTerms, EmptyUnkAndHandValue) {
  auto enc = TermEncoderParams::zeros(1, 1, 1);
  enc.Wr(0, 0) = 2.0;
  enc.lstm.W << 0.5, -0.25, 1.0, 0.75;
  enc.lstm.b << 0.1, 0.0, -0.1, 0.2;
  enc.empty_term << 0.3;
  enc.unk_term << -0.6;
  VectorStore store(1);
  store.set(Term("cat"), Vec::Constant(1, 0.4));

  auto hand = [&](double r) {
    const double x = 2.0 * r;
    const double i = sig(0.5 * x + 0.1), o = sig(x - 0.1), g = std::tanh(0.75 * x + 0.2);
    return o * std::tanh(i * g);
  };
  EXPECT_NEAR(encode_terms(enc, {Term("cat")}, store)[0], hand(0.4), 1e-15);
  EXPECT_NEAR(encode_terms(enc, {}, store)[0], hand(0.3), 1e-15);
  EXPECT_NEAR(encode_terms(enc, {Term("zebra")}, store)[0], hand(-0.6), 1e-15);
  EXPECT_TRUE(encode_terms(enc, {Term("cat"), Term("zebra")}, store) ==
              encode_terms(enc, {Term("cat"), Term("zebra")}, store));
}

TEST(Train, ZeroIterationsReturnsInitialisation) {
  Rng rng(1);
  auto d = tiny_dims(rng);
  std::vector<Example> data{random_example(rng, d)};
  TrainConfig cfg;
  cfg.max_iterations = 0;
  cfg.rng_seed = 77;
  auto r = train(data, InputMode::Full, d, cfg);
  auto init = init_params(InputMode::Full, d, cfg.init_scale, 77);
  EXPECT_EQ(oracle::flatten(r.params), oracle::flatten(init));
  EXPECT_TRUE(r.loss_curve.empty());
}

TEST(Train, SameSeedIsBitIdentical) {
  Rng rng(6);
  auto d = tiny_dims(rng);
  std::vector<Example> data;
  for (int k = 0; k < 6; ++k) data.push_back(random_example(rng, d));
  TrainConfig cfg;
  cfg.max_iterations = 30;
  cfg.batch_size = 4;
  cfg.initial_lr = 0.5;
  auto a = train(data, InputMode::Full, d, cfg);
  auto b = train(data, InputMode::Full, d, cfg);
  EXPECT_EQ(oracle::flatten(a.params), oracle::flatten(b.params));
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  cfg.rng_seed = 2;
  EXPECT_NE(oracle::flatten(train(data, InputMode::Full, d, cfg).params),
            oracle::flatten(a.params));
}

TEST(Train, LearningRateSchedule) {
  TrainConfig cfg;
  cfg.max_iterations = 100;
  EXPECT_DOUBLE_EQ(cfg.learning_rate(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(cfg.learning_rate(25, 0), 0.4);
  EXPECT_DOUBLE_EQ(cfg.learning_rate(99, 0), 2.0 / 125.0);
  cfg.decay = 0.5;
  EXPECT_DOUBLE_EQ(cfg.learning_rate(0, 2), 0.5);
  cfg.milestones = {5, 3};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, DivergenceIsReported) {
  Rng rng(2);
  auto d = tiny_dims(rng);
  std::vector<Example> data{random_example(rng, d)};
  data[0].cond.image[0] = INFINITY;
  TrainConfig cfg;
  cfg.max_iterations = 3;
  EXPECT_THROW(train(data, InputMode::Image, d, cfg), NumericError);
  EXPECT_THROW(train({}, InputMode::Image, d, cfg), ValidationError);
}

TEST(Pretrain, LossDecreasesAndIsDeterministic) {
  Rng rng(31);
  ModelDims d;
  d.vocab = 10;
  d.embed = 8;
  d.hidden = 8;
  d.feature = 4;
  d.term_dim = 3;
  d.encoder_input = 4;
  d.encoder_hidden = 4;
  std::vector<Example> data;
  for (int k = 0; k < 8; ++k) {
    auto ex = random_example(rng, d);
    if (k == 0) ex.cond.direct.clear();  // EMPTY term list
    data.push_back(ex);
  }
  TrainConfig cfg;
  cfg.max_iterations = 500;
  cfg.batch_size = 8;
  cfg.initial_lr = 0.5;
  auto first = pretrain_term_encoder(data, d, cfg);
  const double before = loss(init_params(InputMode::DirectImage, d, cfg.init_scale, cfg.rng_seed),
                             data, cfg.lambda_theta);
  const double after = loss(first.model, data, cfg.lambda_theta);
  EXPECT_LT(after, before);
  EXPECT_LT(first.loss_curve.back(), first.loss_curve.front());

  auto second = pretrain_term_encoder(data, d, cfg);
  EXPECT_TRUE(second.encoder.Wr == first.encoder.Wr);
  EXPECT_TRUE(second.encoder.lstm.U == first.encoder.lstm.U);

  // The pretrained encoder seeds both encoder slots of a full model.
  cfg.max_iterations = 0;
  auto full = train(data, InputMode::Full, d, cfg, &first.encoder);
  EXPECT_TRUE(full.params.enc_direct->Wr == first.encoder.Wr);
  EXPECT_TRUE(full.params.enc_indirect->lstm.W == first.encoder.lstm.W);
  EXPECT_TRUE(full.params.enc_indirect->empty_term == first.encoder.empty_term);
}

TEST(Modes, NamesAndParsing) {
  for (auto m : kAllModes) EXPECT_EQ(parse_mode(mode_name(m)), m);
  EXPECT_EQ(parse_mode("baseline-nic"), InputMode::Image);
  EXPECT_EQ(parse_mode("cnet-nic"), InputMode::Full);
  EXPECT_THROW(parse_mode("fine-tune-cnn"), ConfigError);
}

TEST(Modes, NoneModeIgnoresConditioning) {
  Rng rng(10);
  auto d = tiny_dims(rng);
  auto m = init_params(InputMode::None, d, 0.5, 4);
  auto ex = random_example(rng, d);
  auto other = random_example(rng, d);
  other.tokens = ex.tokens;
  auto a = forward_caption(m, ex.cond, ex.tokens);
  auto b = forward_caption(m, other.cond, other.tokens);
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_TRUE(a[t] == b[t]);
}
