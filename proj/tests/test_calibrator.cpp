#include <numeric>

#include "doctest.h"
#include "selcal/calibrator.hpp"
#include "selcal/error.hpp"
#include "selcal/metrics.hpp"
#include "selcal/synth.hpp"
#include "support.hpp"

using namespace selcal;
using namespace selcal::testing;

namespace {

const Dataset& small_corpus() {
  static const Dataset d = generate_synthetic_corpus(12, -18.0, -5.0, SynthConfig{}, 314);
  return d;
}

std::vector<std::size_t> all_utterances(const PreparedCorpus& pc) {
  std::vector<std::size_t> b(pc.utterances.size());
  std::iota(b.begin(), b.end(), std::size_t{0});
  return b;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  const auto x = a.blocks();
  const auto y = b.blocks();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::equal(x[i].values.begin(), x[i].values.end(), y[i].values.begin(), y[i].values.end())) return false;
  }
  return true;
}

double block_abs_sum(const ModelParams& p, ParamGroup group) {
  double s = 0.0;
  for (const auto& b : p.blocks()) {
    if (b.group != group) continue;
    for (double v : b.values) s += std::abs(v);
  }
  return s;
}

}  // namespace

TEST_SUITE("calibrator") {

TEST_CASE("classifier output") {
  FeatureConfig cfg;
  const ModelParams zero = ModelParams::zeros(cfg);
  CHECK(classify(Vector::Random(105), zero) == 0.5);

  const ModelParams p = ModelParams::initialize(cfg, 5);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 10.0);
  for (int t = 0; t < 10000; ++t) {
    Vector f(105);
    for (auto& v : f) v = n(rng);
    const double o = classify(f, p);
    CHECK((o > 0.0 && o < 1.0));
  }

  ModelParams toy = ModelParams::zeros(cfg, 2);
  toy.classifier.w1(0, 0) = 1.5;
  toy.classifier.w1(0, 1) = -2.0;
  toy.classifier.w1(1, 2) = 0.5;
  toy.classifier.b1 = Vector{{0.1, -1.0}};
  toy.classifier.w2 = Vector{{2.0, -3.0}};
  toy.classifier.b2 = 0.25;
  Vector f = Vector::Zero(105);
  f[0] = 0.9;
  f[1] = 0.3;
  f[2] = 4.0;
  // h = relu(1.35 - 0.6 + 0.1, 2.0 - 1.0) = (0.85, 1.0); z = 1.7 - 3.0 + 0.25
  CHECK(classify(f, toy) == doctest::Approx(1.0 / (1.0 + std::exp(1.05))).epsilon(1e-12));
}

TEST_CASE("temperature head") {
  FeatureConfig cfg;
  ModelParams p = ModelParams::zeros(cfg);
  const Vector f = Vector::Random(105);
  CHECK(predict_temperature(f, p) == doctest::Approx(1.693147).epsilon(1e-6));
  p.temperature.b2 = -40.0;
  // 1 + 4.25e-18 rounds to 1 in double precision; the softplus term itself is exact
  CHECK(predict_temperature(f, p) == 1.0);
  CHECK(softplus(-40.0) == doctest::Approx(4.248354e-18).epsilon(1e-6));
  p.temperature.b2 = 40.0;
  CHECK(std::abs(predict_temperature(f, p) - 41.0) < 1e-9);
  CHECK(softplus(-700.0) > 0.0);
  CHECK(softplus(-800.0) == 0.0);
  CHECK(softplus(800.0) == 800.0);
}

TEST_CASE("selective application") {
  FeatureConfig cfg;
  ModelParams p = ModelParams::zeros(cfg);
  const TokenRecord two = record_from_logits({2.0, 0.0});
  const Vector f = Vector::Zero(105);

  SUBCASE("nothing flagged leaves tokens untouched") {
    p.classifier.b2 = -50.0;
    std::mt19937_64 rng(2);
    for (int t = 0; t < 100; ++t) {
      const TokenRecord r = random_record(rng);
      const CalibratedToken c = select_and_apply(r, f, p);
      CHECK_FALSE(c.flagged);
      CHECK(c.confidence == r.confidence);
      CHECK(c.temperature == 1.0);
    }
  }
  SUBCASE("temperature near one barely moves flagged tokens") {
    p.classifier.b2 = 50.0;
    p.temperature.b2 = -40.0;
    std::mt19937_64 rng(3);
    for (int t = 0; t < 100; ++t) {
      const TokenRecord r = random_record(rng);
      const CalibratedToken c = select_and_apply(r, f, p);
      CHECK(c.flagged);
      CHECK(c.confidence <= r.confidence);
      CHECK(r.confidence - c.confidence < 1e-6);
    }
  }
  SUBCASE("flagged [2,0] at T = 2") {
    p.classifier.b2 = 50.0;
    p.temperature.b2 = std::log(std::exp(1.0) - 1.0);
    const CalibratedToken c = select_and_apply(two, f, p);
    CHECK(c.temperature == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(two.confidence == doctest::Approx(0.880797).epsilon(1e-6));
    CHECK(c.confidence == doctest::Approx(0.731059).epsilon(1e-6));
  }
  SUBCASE("threshold is inclusive") {
    p.classifier.b2 = 0.0;
    CHECK(select_and_apply(two, f, p, 0.5).flagged);
  }
}

TEST_CASE("selection invariants over random models and records") {
  FeatureConfig cfg;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int m = 0; m < 10; ++m) {
    const ModelParams p = ModelParams::initialize(cfg, 100 + m);
    for (int t = 0; t < 100; ++t) {
      const TokenRecord r = random_record(rng);
      Vector f(105);
      for (auto& v : f) v = 3.0 * n(rng);
      const CalibratedToken c = select_and_apply(r, f, p);
      if (c.flagged) {
        CHECK(c.temperature > 1.0);
        CHECK(c.confidence <= r.confidence);
        // the emitted token stays the argmax: its scaled probability beats the
        // runner-up's scaled probability
        const double ratio = std::exp((r.topk_logits[1] - r.topk_logits[0]) / c.temperature);
        CHECK(ratio <= 1.0);
      } else {
        CHECK(c.confidence == r.confidence);
      }
    }
  }
}

TEST_CASE("weighted BCE") {
  const std::vector<double> half = {0.5};
  CHECK(loss_weighted_bce(half, std::vector{1}, 7.0) == doctest::Approx(4.852030).epsilon(1e-6));
  CHECK(loss_weighted_bce(half, std::vector{0}, 7.0) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(loss_weighted_bce(std::vector{1.0, 0.0}, std::vector{1, 0}, 7.0) < 1e-6 * 7.0);
  CHECK_THROWS_AS(loss_weighted_bce(half, std::vector{1, 0}, 7.0), ValidationError);
}

TEST_CASE("selective CE") {
  CHECK(loss_selective_ce(std::vector<double>{}, std::vector<int>{}) == 0.0);
  // -ln(0.269) and -ln(0.731)
  CHECK(loss_selective_ce(std::vector{0.731}, std::vector{0}) == doctest::Approx(1.313044).epsilon(1e-6));
  CHECK(loss_selective_ce(std::vector{0.731}, std::vector{1}) == doctest::Approx(0.313342).epsilon(1e-6));
  CHECK(loss_selective_ce(std::vector{0.2, 0.9}, std::vector{0, 1}) ==
        doctest::Approx(-0.5 * (std::log(0.8) + std::log(0.9))).epsilon(1e-12));
}

TEST_CASE("soft ECE") {
  SUBCASE("calibrated tight cluster") {
    std::vector<double> c(10000, 0.55);
    std::vector<int> y(10000, 0);
    std::fill(y.begin(), y.begin() + 5500, 1);
    CHECK(loss_soft_ece(c, y, 10, 0.01) < 0.01);
  }
  SUBCASE("converges to hard ECE away from bin edges") {
    // Kernel memberships leak across an edge: at distance d from it the
    // log-odds between the two nearest bins are 2d / (M tau), so agreement
    // needs d well above M tau / 2.
    auto worst_gap = [](double tau, double margin) {
      std::mt19937_64 rng(6);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      double worst = 0.0;
      for (int t = 0; t < 100; ++t) {
        std::vector<ScoredToken> tok;
        std::vector<double> c;
        std::vector<int> y;
        while (c.size() < 200) {
          const double v = u(rng);
          if (std::abs(v * 10.0 - std::round(v * 10.0)) / 10.0 < margin) continue;
          c.push_back(v);
          y.push_back(u(rng) < v ? 1 : 0);
          tok.push_back({v, y.back(), std::nullopt});
        }
        worst = std::max(worst, std::abs(loss_soft_ece(c, y, 10, tau) - ece(tok)));
      }
      return worst;
    };
    CHECK(worst_gap(1e-4, 5e-3) < 1e-3);
    CHECK(worst_gap(1e-5, 1e-3) < 1e-3);
    CHECK(worst_gap(1e-5, 1e-3) <= worst_gap(1e-4, 1e-3));
    CHECK(worst_gap(1e-4, 1e-3) <= worst_gap(1e-3, 1e-3));
  }
  SUBCASE("edge leakage has the kernel's closed form") {
    // two tokens straddling nothing: c = 0.3 + d with y = 1, c = 0.25 with y = 0
    const double d = 1e-3, tau = 1e-4;
    const std::vector<double> c = {0.3 + d, 0.25};
    const std::vector<int> y = {1, 0};
    const double leak = 1.0 / (1.0 + std::exp(0.2 * d / tau));
    // the first token puts `leak` of its gap into bin 3, where it offsets the second
    const double gap0 = 1.0 - c[0], gap1 = c[1];
    const double want = ((1.0 - leak) * gap0 + std::abs(leak * gap0 - gap1)) / 2.0;
    CHECK(loss_soft_ece(c, y, 10, tau) == doctest::Approx(want).epsilon(1e-6));
  }
  SUBCASE("single token") {
    for (double c : {0.13, 0.47, 0.86}) {
      CHECK(loss_soft_ece(std::vector{c}, std::vector{1}, 10, 1e-4) == doctest::Approx(1.0 - c).epsilon(1e-3));
    }
  }
  SUBCASE("gradient against central differences") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.02, 0.98);
    std::vector<double> c(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < c.size(); ++i) {
      c[i] = u(rng);
      y[i] = u(rng) < c[i];
    }
    std::vector<double> d(c.size());
    loss_soft_ece(c, y, 10, 0.01, d);
    for (std::size_t i = 0; i < c.size(); ++i) {
      auto plus = c, minus = c;
      plus[i] += 1e-6;
      minus[i] -= 1e-6;
      const double fd = (loss_soft_ece(plus, y, 10, 0.01) - loss_soft_ece(minus, y, 10, 0.01)) / 2e-6;
      CHECK(d[i] == doctest::Approx(fd).epsilon(1e-4).scale(1e-6));
    }
  }
}

TEST_CASE("preparation requires labels") {
  Dataset d = small_corpus();
  for (auto& r : d.records) r.y.reset(), r.o.reset();
  CHECK_THROWS_WITH_AS(prepare_corpus(d, FeatureConfig{}, true), doctest::Contains("overconfidence labels"),
                       ValidationError);
  CHECK_NOTHROW(prepare_corpus(d, FeatureConfig{}, false));

  const PreparedCorpus pc = prepare_corpus(small_corpus(), FeatureConfig{}, true);
  for (std::size_t i = 0; i < pc.tokens.size(); ++i) {
    const TokenRecord& r = small_corpus().records[i];
    CHECK(*pc.tokens[i].o == label_overconfident(r));
  }
}

TEST_CASE("total loss decomposition and gradient routing") {
  const PreparedCorpus pc = prepare_corpus(small_corpus(), FeatureConfig{}, true);
  const auto batch = all_utterances(pc);
  const ModelParams params = ModelParams::initialize(pc.config, 9);
  TrainConfig cfg;

  SUBCASE("components are non-negative and combine with the lambdas") {
    const LossBreakdown lb = total_loss(pc, batch, params, cfg, {});
    CHECK(lb.bce >= 0.0);
    CHECK(lb.ce >= 0.0);
    CHECK(lb.ece >= 0.0);
    CHECK(lb.total == doctest::Approx(0.5 * lb.bce + lb.ce + 10.0 * lb.ece).epsilon(1e-12));
    TrainConfig bce_only = cfg;
    bce_only.lambda_ce = 0.0;
    bce_only.lambda_ece = 0.0;
    const LossBreakdown b = total_loss(pc, batch, params, bce_only, {});
    CHECK(b.total == bce_only.lambda_bce * b.bce);
  }
  SUBCASE("no flagged tokens means no temperature-head gradient") {
    ModelParams p = params;
    p.classifier.b2 = -60.0;
    ModelParams g = ModelParams::zeros(p.config);
    const LossBreakdown lb = total_loss(pc, batch, p, cfg, {}, &g);
    CHECK(lb.n_flagged == 0);
    CHECK(block_abs_sum(g, ParamGroup::Temperature) == 0.0);
  }
  SUBCASE("classifier weights only reach BCE; temperature weights never reach BCE") {
    const LossBreakdown base = total_loss(pc, batch, params, cfg, {});
    ModelParams pc_perturbed = params;
    pc_perturbed.classifier.w2 *= 1.0 + 1e-9;
    const LossBreakdown a = total_loss(pc, batch, pc_perturbed, cfg, {});
    REQUIRE(a.n_flagged == base.n_flagged);
    CHECK(a.ce == base.ce);
    CHECK(a.ece == base.ece);

    ModelParams pt = params;
    pt.temperature.w1 *= 1.5;
    pt.temperature.b2 += 0.7;
    const LossBreakdown b = total_loss(pc, batch, pt, cfg, {});
    CHECK(b.bce == base.bce);
    CHECK(b.ce != base.ce);

    ModelParams g = ModelParams::zeros(params.config);
    TrainConfig no_bce = cfg;
    no_bce.lambda_bce = 0.0;
    total_loss(pc, batch, params, no_bce, {}, &g);
    CHECK(block_abs_sum(g, ParamGroup::Classifier) == 0.0);
  }
  SUBCASE("all lambdas zero give a zero gradient") {
    TrainConfig zero = cfg;
    zero.lambda_bce = zero.lambda_ce = zero.lambda_ece = 0.0;
    ModelParams g = ModelParams::initialize(params.config, 1);
    const LossBreakdown lb = total_loss(pc, batch, params, zero, {}, &g);
    CHECK(lb.total == 0.0);
    CHECK(block_abs_sum(g, ParamGroup::Shared) + block_abs_sum(g, ParamGroup::Classifier) +
              block_abs_sum(g, ParamGroup::Temperature) ==
          0.0);
  }
}

TEST_CASE("corpus calibration matches per-token application") {
  const PreparedCorpus pc = prepare_corpus(small_corpus(), FeatureConfig{}, true);
  const ModelParams params = ModelParams::initialize(pc.config, 10);
  const auto cal = calibrate_corpus(pc, params, 0.5, {});
  const Dataset& d = small_corpus();
  for (std::size_t u = 0; u < d.utterances.size(); ++u) {
    for (std::size_t i : d.tokens_of[u]) {
      const FeatureVector f = assemble_features(d.records[i], d.utterances[u], &d.mels[u], params, pc.config);
      const CalibratedToken c = select_and_apply(d.records[i], f.flatten(), params);
      CHECK(cal[i].flagged == c.flagged);
      CHECK(cal[i].confidence == doctest::Approx(c.confidence).epsilon(1e-12));
      CHECK(cal[i].o_hat == doctest::Approx(c.o_hat).epsilon(1e-12));
    }
  }
}

TEST_CASE("training contract") {
  const Dataset& d = small_corpus();
  const ModelParams init = ModelParams::initialize(FeatureConfig{}, 11);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult none = train(d, nullptr, init, cfg);
  CHECK(none.report.epochs.empty());
  CHECK(same_params(none.params, init));

  cfg.epochs = 2;
  cfg.batch_tokens = 64;
  const TrainResult a = train(d, nullptr, init, cfg);
  const TrainResult b = train(d, nullptr, init, cfg);
  CHECK(a.report.epochs.size() == 2);
  CHECK(same_params(a.params, b.params));
  CHECK_FALSE(same_params(a.params, init));
  cfg.seed = 99;
  CHECK_FALSE(same_params(train(d, nullptr, init, cfg).params, a.params));
}

TEST_CASE("utterance granularity on single-token utterances equals token granularity") {
  SynthConfig sc;
  sc.min_tokens = sc.max_tokens = 1;
  const Dataset d = generate_synthetic_corpus(40, -18.0, -5.0, sc, 77);
  FeatureConfig fc;
  fc.ablation_mask = {FeatureGroup::TokenEmbedding, FeatureGroup::Position, FeatureGroup::TopkLogits};
  const ModelParams selector = ModelParams::initialize(fc, 12);
  const ModelParams init = ModelParams::initialize(fc, 13);

  PreparedCorpus pc = prepare_corpus(d, fc, true);
  attach_selector(pc, selector);
  const auto batch = all_utterances(pc);
  TrainConfig cfg;
  ModelParams g_tok = ModelParams::zeros(fc), g_utt = ModelParams::zeros(fc);
  const LossBreakdown lt = total_loss(pc, batch, init, cfg, {TemperatureGranularity::Token, true}, &g_tok);
  const LossBreakdown lu = total_loss(pc, batch, init, cfg, {TemperatureGranularity::Utterance, true}, &g_utt);
  CHECK(lt.total == lu.total);
  CHECK(same_params(g_tok, g_utt));

  cfg.epochs = 2;
  const TrainResult tok = train(d, nullptr, init, cfg, {TemperatureGranularity::Token, &selector});
  const TrainResult utt = train(d, nullptr, init, cfg, {TemperatureGranularity::Utterance, &selector});
  CHECK(same_params(tok.params, utt.params));
  CHECK_THROWS_AS(train(d, nullptr, init, cfg, {TemperatureGranularity::Utterance, nullptr}), ValidationError);
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.lambda_ece = 3.0;
  c.adam_beta1 = 0.8;
  c.seed = 5;
  CHECK(train_config_from_json(to_json(c)) == c);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"lambda_x", 1}}), ValidationError);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"soft_bins", 0}}), ValidationError);
}

}  // TEST_SUITE
