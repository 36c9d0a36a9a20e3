#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "datwep/curriculum.hpp"
#include "datwep/rng.hpp"
#include "fd_oracle.hpp"

using namespace datwep;
using namespace datwep::curriculum;

namespace {

double std_sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

// alpha-objective: blended loss plus lambda * |a - s(a)|, evaluated forward only.
double alpha_objective(double a, double l_vqa, double l_seg, const SchedulerConfig& cfg) {
  return losses::total_loss(l_vqa, l_seg, a, cfg.alpha_convention) + cfg.lambda_reg * datap_regularizer(a, cfg.sigmoid_variant);
}

double central(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

losses::LossBreakdown three_sample_breakdown() {
  losses::LossBreakdown bd;
  bd.target_classes = {0, 0, 1};
  bd.per_sample_nll = {-std::log(0.7), -std::log(0.5), -std::log(0.2)};
  bd.class_weights_used = {1.0, 1.0};
  return bd;
}

struct RandomBatch {
  Tensor logits;
  std::vector<std::size_t> y;
  std::vector<double> w;
};

RandomBatch random_batch(Rng& rng) {
  const std::size_t N = 1 + rng.below(16), C = 2 + rng.below(7);
  RandomBatch b{fd::random_tensor({N, C}, rng, -3, 3), std::vector<std::size_t>(N), std::vector<double>(C)};
  for (auto& v : b.y) v = rng.below(C);
  for (auto& v : b.w) v = rng.uniform(0.2, 3.0);
  return b;
}

losses::LossBreakdown breakdown_of(const RandomBatch& b) {
  Tape tape;
  return losses::vqa_loss(tape.leaf(b.logits), b.y, b.w).breakdown;
}

}  // namespace

TEST(DatapTest, RegularizerGradientReference) {
  const double s = std_sigmoid(0.5);
  EXPECT_NEAR(s, 0.622459, 5e-7);
  EXPECT_NEAR(datap_reg_grad(0.5), -0.764996, 1e-6);
  auto reg = [](double a) { return datap_regularizer(a); };
  EXPECT_NEAR(datap_reg_grad(0.5), central(reg, 0.5, 1e-6), 1e-8);
  EXPECT_GT(datap_reg_grad(2.0), 0.0);
  EXPECT_LT(datap_reg_grad(-1.0), 0.0);
}

TEST(DatapTest, KinkReturnsZero) {
  const double fp = regularizer_fixed_point();
  EXPECT_NEAR(fp, 0.659046, 1e-6);
  EXPECT_LT(std::abs(fp - std_sigmoid(fp)), 1e-12);
  EXPECT_EQ(datap_reg_grad(fp), 0.0);
}

TEST(DatapTest, StepReference) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(2);
  const double g = datap_grad(0.5, 0.9, 0.4, cfg);
  EXPECT_NEAR(g, -0.073747, 1e-6);
  const double a = datap_step(st, 0.9, 0.4, cfg);
  EXPECT_NEAR(a, 0.500147, 5e-7);
  EXPECT_DOUBLE_EQ(a, 0.5 - 0.002 * g);
  EXPECT_EQ(st.history.size(), 1u);
  EXPECT_EQ(st.history[0].alpha, 0.5);
}

TEST(DatapTest, FixedPointIsStationaryAndHarderVqaLowersAlpha) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(2);
  st.alpha = regularizer_fixed_point();
  const double a0 = st.alpha;
  datap_step(st, 0.8, 0.8, cfg);
  EXPECT_NEAR(st.alpha, a0, 1e-9);

  st.alpha = a0;
  datap_step(st, 1.2, 0.3, cfg);
  EXPECT_LT(st.alpha, a0);
}

TEST(DatapTest, GradientMatchesFiniteDifferences) {
  for (auto conv : {losses::AlphaConvention::VqaWeighted, losses::AlphaConvention::SegWeighted}) {
    for (auto var : {SigmoidVariant::Standard, SigmoidVariant::Negated}) {
      SchedulerConfig cfg;
      cfg.alpha_convention = conv;
      cfg.sigmoid_variant = var;
      for (double a : {-0.5, 0.1, 0.5, 0.9, 1.5}) {
        if (std::abs(a - scheduler_sigmoid(a, var)) < 1e-4) continue;
        auto f = [&](double x) { return alpha_objective(x, 0.9, 0.4, cfg); };
        const double numeric = central(f, a, 1e-6);
        EXPECT_LT(fd::rel_err(datap_grad(a, 0.9, 0.4, cfg), numeric), 1e-6)
            << "alpha=" << a << " variant=" << sigmoid_variant_name(var);
      }
    }
  }
}

TEST(DatapTest, SegWeightedConventionNegatesTaskTerm) {
  SchedulerConfig a, b;
  b.alpha_convention = losses::AlphaConvention::SegWeighted;
  const double reg = a.lambda_reg * datap_reg_grad(0.3);
  EXPECT_DOUBLE_EQ(datap_grad(0.3, 0.9, 0.4, a) - reg, 0.5);
  EXPECT_DOUBLE_EQ(datap_grad(0.3, 0.9, 0.4, b) - reg, -0.5);
}

TEST(DatapTest, RestoringForce) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(1);
  st.alpha = 1.5;
  int steps = 0;
  while (st.alpha >= 1.0) {
    const double before = st.alpha;
    datap_step(st, 0.7, 0.7, cfg);
    ASSERT_LT(st.alpha, before);
    ASSERT_LT(++steps, 500);
  }
  st.alpha = -0.5;
  steps = 0;
  while (st.alpha <= 0.0) {
    const double before = st.alpha;
    datap_step(st, 0.7, 0.7, cfg);
    ASSERT_GT(st.alpha, before);
    ASSERT_LT(++steps, 500);
  }
}

TEST(DatapTest, NonFiniteLossLeavesStateUnchanged) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(2);
  EXPECT_THROW(datap_step(st, std::numeric_limits<double>::quiet_NaN(), 0.1, cfg), SchedulerError);
  EXPECT_THROW(datap_step(st, 0.1, std::numeric_limits<double>::infinity(), cfg), SchedulerError);
  EXPECT_EQ(st.alpha, 0.5);
  EXPECT_EQ(st.step_count, 0u);
  EXPECT_TRUE(st.history.empty());
}

TEST(DawepTest, ThreeSampleReference) {
  const auto bd = three_sample_breakdown();
  const double S = bd.per_sample_nll[0] + bd.per_sample_nll[1] + bd.per_sample_nll[2];
  EXPECT_NEAR(S, 2.659260, 5e-7);
  const auto g = dawep_grads(bd);
  // exact value, -0.241006 to six places
  EXPECT_NEAR(g[0], -0.24100596670772, 1e-12);
  EXPECT_NEAR(g[1], 0.24100596670772, 1e-12);
  EXPECT_NEAR(g[0], -(2.0 / 9.0) * S + (bd.per_sample_nll[0] + bd.per_sample_nll[1]) / 3.0, 1e-15);

  // central difference of the weighted loss in each weight
  for (std::size_t k = 0; k < 2; ++k) {
    auto f = [&](double wk) {
      std::vector<double> w = bd.class_weights_used;
      w[k] = wk;
      return losses::weighted_nll(bd.per_sample_nll, bd.target_classes, w);
    };
    EXPECT_NEAR(g[k], central(f, 1.0, 1e-6), 1e-9);
  }
}

TEST(DawepTest, GradientsMatchFiniteDifferencesOnRandomBatches) {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const auto b = random_batch(rng);
    const auto g = dawep_grads(breakdown_of(b));
    for (std::size_t k = 0; k < b.w.size(); ++k) {
      auto f = [&](double wk) {
        auto w = b.w;
        w[k] = wk;
        return losses::vqa_loss_value(b.logits, b.y, w);
      };
      EXPECT_LT(fd::rel_err(g[k], central(f, b.w[k], 1e-6)), 1e-6) << "trial " << trial << " class " << k;
    }
  }
}

TEST(DawepTest, SingleClassAndAbsentClassesHaveZeroGradient) {
  losses::LossBreakdown bd;
  bd.target_classes = {2, 2, 2};
  bd.per_sample_nll = {0.3, 1.1, 0.05};
  bd.class_weights_used = {1.0, 1.0, 1.0, 1.0};
  const auto g = dawep_grads(bd);
  EXPECT_NEAR(g[2], 0.0, 1e-15);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[3], 0.0);
}

TEST(DawepTest, ScalingWeightsScalesGradientsInversely) {
  Rng rng(78);
  for (int trial = 0; trial < 20; ++trial) {
    auto b = random_batch(rng);
    const auto g = dawep_grads(breakdown_of(b));
    const double c = rng.uniform(0.3, 4.0);
    for (auto& w : b.w) w *= c;
    const auto gc = dawep_grads(breakdown_of(b));
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(gc[k], g[k] / c, 1e-12);
  }
}

TEST(DawepTest, SymmetricBatchIsStationary) {
  losses::LossBreakdown bd;
  bd.target_classes = {0, 1, 2, 0, 1, 2};
  bd.per_sample_nll = {0.2, 0.5, 0.1, 0.6, 0.3, 0.7};  // per-class sums all 0.8
  bd.class_weights_used = {1.0, 1.0, 1.0};
  for (double g : dawep_grads(bd)) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(DawepTest, RejectsMismatchedBreakdown) {
  auto bd = three_sample_breakdown();
  bd.per_sample_nll.pop_back();
  EXPECT_THROW(dawep_grads(bd), ValidationError);
  auto bd2 = three_sample_breakdown();
  bd2.target_classes[2] = 5;
  EXPECT_THROW(dawep_grads(bd2), ValidationError);
}

TEST(DawepTest, StepClipsAndMovesWeights) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(3);
  dawep_step(st, std::vector<double>{4.0, 0.0, -0.2}, cfg);
  EXPECT_DOUBLE_EQ(st.class_weights[0], 1.0 - 0.0015);
  EXPECT_EQ(st.class_weights[1], 1.0);
  EXPECT_DOUBLE_EQ(st.class_weights[2], 1.0 + 0.0002);
  EXPECT_EQ(st.history[0].weight_grads_raw[0], 4.0);
  EXPECT_EQ(st.history[0].weight_grads_clipped[0], 1.5);

  auto st2 = SchedulerState::initial(2);
  dawep_step(st2, dawep_grads(three_sample_breakdown()), cfg);
  EXPECT_NEAR(st2.class_weights[0], 1.0 + 0.001 * 0.24100596670772, 1e-15);
  EXPECT_NEAR(st2.class_weights[1], 1.0 - 0.001 * 0.24100596670772, 1e-15);
}

TEST(DawepTest, WeightChangeIsBoundedAndFloored) {
  SchedulerConfig cfg;
  cfg.eps_dawep = 0.3;
  auto st = SchedulerState::initial(4);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> g(4);
    for (auto& v : g) v = rng.uniform(-10, 10);
    const auto before = st.class_weights;
    dawep_step(st, g, cfg);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_LE(std::abs(st.class_weights[k] - before[k]), cfg.eps_dawep * 1.5 + 1e-15);
      EXPECT_GE(st.class_weights[k], cfg.weight_floor);
    }
  }
}

TEST(DawepTest, NonFiniteGradientLeavesStateUnchanged) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(2);
  EXPECT_THROW(dawep_step(st, std::vector<double>{0.1, std::nan("")}, cfg), SchedulerError);
  EXPECT_EQ(st.class_weights, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(st.step_count, 0u);
}

TEST(DatwepTest, InitialStateAndZeroLosses) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(3);
  EXPECT_EQ(st.alpha, 0.5);
  EXPECT_EQ(st.class_weights, std::vector<double>(3, 1.0));

  losses::LossBreakdown bd;
  bd.target_classes = {0, 1, 2};
  bd.per_sample_nll = {0, 0, 0};
  bd.class_weights_used = st.class_weights;
  datwep_step(st, bd, cfg);
  EXPECT_DOUBLE_EQ(st.alpha, 0.5 - cfg.eps_datap * cfg.lambda_reg * datap_reg_grad(0.5));
  EXPECT_EQ(st.class_weights, std::vector<double>(3, 1.0));
}

TEST(DatwepTest, OneRowPerBatchAndCsvExport) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(2);
  auto bd = three_sample_breakdown();
  bd.l_seg = 0.4;
  bd.l_vqa = 0.886420;
  for (int i = 0; i < 7; ++i) {
    bd.class_weights_used = st.class_weights;
    datwep_step(st, bd, cfg);
  }
  EXPECT_EQ(st.step_count, 7u);
  EXPECT_EQ(st.history.size(), 7u);
  EXPECT_EQ(st.history[0].alpha, 0.5);
  EXPECT_EQ(st.history[0].weights, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(st.history[1].alpha, st.history[0].alpha - cfg.eps_datap * st.history[0].alpha_grad);

  std::ostringstream os;
  write_history_csv(os, st);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,alpha,l_seg,l_vqa,w_0,w_1");
  std::getline(is, line);
  EXPECT_EQ(line, "0,0.5,0.40000000000000002,0.88641999999999999,1,1");
  int rows = 1;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 7);
}

TEST(DatwepTest, RejectsWeightCountMismatchWithoutSideEffects) {
  SchedulerConfig cfg;
  auto st = SchedulerState::initial(3);
  EXPECT_THROW(datwep_step(st, three_sample_breakdown(), cfg), ValidationError);
  EXPECT_EQ(st.step_count, 0u);
}

TEST(DatwepTest, EpochAccumulatorPoolsSamples) {
  auto a = three_sample_breakdown();
  a.l_seg = 0.2;
  a.l_vqa = 1.0;
  auto b = three_sample_breakdown();
  b.l_seg = 0.4;
  b.l_vqa = 0.5;
  EpochAccumulator acc;
  acc.add(a);
  acc.add(b);
  const auto m = acc.merged();
  EXPECT_DOUBLE_EQ(m.l_seg, 0.3);
  EXPECT_DOUBLE_EQ(m.l_vqa, 0.75);
  EXPECT_EQ(m.target_classes.size(), 6u);
  const auto g = dawep_grads(m);
  const auto g1 = dawep_grads(a);
  EXPECT_NEAR(g[0], g1[0], 1e-15);  // duplicated batch leaves the normalised gradient unchanged
}

TEST(SchedulerConfigTest, Validation) {
  SchedulerConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.eps_datap = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.clip_min = 2.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  EXPECT_EQ(parse_sigmoid_variant("negated"), SigmoidVariant::Negated);
  EXPECT_THROW(parse_sigmoid_variant("tanh"), ValidationError);
}
