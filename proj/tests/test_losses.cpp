#include <gtest/gtest.h>

#include <cmath>

#include "datwep/losses.hpp"
#include "datwep/rng.hpp"
#include "fd_oracle.hpp"

using namespace datwep;
using namespace datwep::losses;

namespace {

// Two-class logits whose softmax puts probability p on class `target`.
Tensor logits_with_target_probs(const std::vector<double>& p, const std::vector<std::size_t>& targets) {
  Tensor t(Shape{p.size(), 2});
  for (std::size_t n = 0; n < p.size(); ++n) {
    t.at(n, targets[n]) = std::log(p[n]);
    t.at(n, 1 - targets[n]) = std::log(1.0 - p[n]);
  }
  return t;
}

double plain_mean_ce(const Tensor& x, const std::vector<std::size_t>& y) {
  const std::size_t N = x.dim(0), C = x.dim(1);
  double s = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(x.at(n, c));
    s += std::log(z) - x.at(n, y[n]);
  }
  return s / static_cast<double>(N);
}

}  // namespace

TEST(BceTest, ReferenceValues) {
  EXPECT_NEAR(bce_seg_loss_value(Tensor(Shape{1, 1, 1, 1}, 20.0), Tensor(Shape{1, 1, 1, 1}, 1.0)),
              std::log1p(std::exp(-20.0)), 1e-18);
  EXPECT_NEAR(bce_seg_loss_value(Tensor(Shape{1, 1, 1, 1}, 20.0), Tensor(Shape{1, 1, 1, 1}, 1.0)), 2.06e-9, 1e-11);
  EXPECT_NEAR(bce_seg_loss_value(Tensor(Shape{1, 2, 1, 1}, 0.0), Tensor::from({1, 2, 1, 1}, {1, 0})),
              std::log(2.0), 1e-15);
  const double big = bce_seg_loss_value(Tensor(Shape{1, 1, 1, 1}, 20.0), Tensor(Shape{1, 1, 1, 1}, 0.0));
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 20.0, 1e-8);
  EXPECT_TRUE(std::isfinite(bce_seg_loss_value(Tensor(Shape{1, 1, 1, 1}, 800.0), Tensor(Shape{1, 1, 1, 1}, 0.0))));
}

TEST(BceTest, RejectsNonBinaryTargetsAndShapeMismatch) {
  EXPECT_THROW(bce_seg_loss_value(Tensor(Shape{1, 1, 1, 2}), Tensor::from({1, 1, 1, 2}, {0.5, 1})), ValidationError);
  EXPECT_THROW(bce_seg_loss_value(Tensor(Shape{1, 1, 1, 2}), Tensor(Shape{1, 1, 2, 1})), ShapeError);
}

TEST(BceTest, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  Tensor target(Shape{2, 3, 4, 4});
  for (auto& v : target.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  auto build = [&](Tape&, const std::vector<Var>& in) { return bce_seg_loss(in[0], target); };
  const auto rep = fd::check_op(build, {fd::random_tensor({2, 3, 4, 4}, rng, -3, 3)}, rng);
  EXPECT_EQ(rep.checked, 96u);
  EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(VqaLossTest, ThreeSampleReference) {
  const std::vector<std::size_t> y = {0, 0, 1};
  const Tensor x = logits_with_target_probs({0.7, 0.5, 0.2}, y);
  const std::vector<double> w = {1.0, 1.0};
  const double oracle = -(std::log(0.7) + std::log(0.5) + std::log(0.2)) / 3.0;
  EXPECT_NEAR(oracle, 0.886420, 5e-7);
  EXPECT_NEAR(vqa_loss_value(x, y, w), oracle, 1e-14);

  Tape tape;
  auto res = vqa_loss(tape.leaf(x), y, w);
  EXPECT_NEAR(res.loss.value().item(), oracle, 1e-14);
  EXPECT_NEAR(res.breakdown.per_sample_nll[0], 0.356675, 5e-7);
  EXPECT_NEAR(res.breakdown.per_sample_nll[1], 0.693147, 5e-7);
  EXPECT_NEAR(res.breakdown.per_sample_nll[2], 1.609438, 5e-7);
  EXPECT_EQ(res.breakdown.target_classes, y);
  EXPECT_EQ(res.breakdown.class_weights_used, w);
}

TEST(VqaLossTest, UniformLogitsGiveLogC) {
  const Tensor x(Shape{5, 4}, 0.3);
  EXPECT_NEAR(vqa_loss_value(x, std::vector<std::size_t>{0, 1, 2, 3, 3}, std::vector<double>(4, 1.0)),
              std::log(4.0), 1e-15);
}

TEST(VqaLossTest, UnitWeightsEqualMeanCrossEntropy) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + rng.below(16), C = 2 + rng.below(7);
    const Tensor x = fd::random_tensor({N, C}, rng, -4, 4);
    std::vector<std::size_t> y(N);
    for (auto& v : y) v = rng.below(C);
    EXPECT_NEAR(vqa_loss_value(x, y, std::vector<double>(C, 1.0)), plain_mean_ce(x, y), 1e-12);
  }
}

TEST(VqaLossTest, ScaleInvariantInWeights) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + rng.below(16), C = 2 + rng.below(7);
    const Tensor x = fd::random_tensor({N, C}, rng, -4, 4);
    std::vector<std::size_t> y(N);
    for (auto& v : y) v = rng.below(C);
    std::vector<double> w(C), w2(C), w3(C);
    for (std::size_t c = 0; c < C; ++c) {
      w[c] = rng.uniform(0.1, 3.0);
      w2[c] = 2.0 * w[c];
      w3[c] = 0.37 * w[c];
    }
    const double base = vqa_loss_value(x, y, w);
    EXPECT_NEAR(vqa_loss_value(x, y, w2), base, 1e-12);
    EXPECT_NEAR(vqa_loss_value(x, y, w3), base, 1e-12);
  }
}

TEST(VqaLossTest, RejectsBadWeightsAndTargets) {
  const Tensor x(Shape{2, 3});
  const std::vector<std::size_t> y = {0, 2};
  EXPECT_THROW(vqa_loss_value(x, y, std::vector<double>{1, 0, 1}), ValidationError);
  EXPECT_THROW(vqa_loss_value(x, y, std::vector<double>{1, -1, 1}), ValidationError);
  EXPECT_THROW(vqa_loss_value(x, y, std::vector<double>{1, 1}), ShapeError);
  EXPECT_THROW(vqa_loss_value(x, std::vector<std::size_t>{0, 3}, std::vector<double>{1, 1, 1}), IndexError);
}

TEST(VqaLossTest, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  const std::vector<std::size_t> y = {0, 2, 2, 1, 4, 0};
  const std::vector<double> w = {0.5, 1.7, 1.0, 2.2, 0.9};
  auto build = [&](Tape&, const std::vector<Var>& in) { return vqa_loss(in[0], y, w).loss; };
  const auto rep = fd::check_op(build, {fd::random_tensor({6, 5}, rng, -2, 2)}, rng);
  EXPECT_EQ(rep.checked, 30u);
  EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(TotalLossTest, BlendAndEndpoints) {
  EXPECT_DOUBLE_EQ(total_loss(2.0, 1.0, 0.5), 1.5);
  EXPECT_EQ(total_loss(2.7, 1.3, 1.0), 2.7);
  EXPECT_EQ(total_loss(2.7, 1.3, 0.0), 1.3);
  EXPECT_DOUBLE_EQ(total_loss(2.0, 1.0, 0.25, AlphaConvention::SegWeighted), 0.25 * 1.0 + 0.75 * 2.0);
  EXPECT_DOUBLE_EQ(total_loss(2.0, 1.0, 1.2), 1.2 * 2.0 - 0.2 * 1.0);

  Tape tape;
  Var lv = tape.leaf(Tensor::scalar(2.0));
  Var ls = tape.leaf(Tensor::scalar(1.0));
  Var t = total_loss(lv, ls, 0.3);
  EXPECT_DOUBLE_EQ(t.value().item(), total_loss(2.0, 1.0, 0.3));
  tape.backward(t);
  EXPECT_DOUBLE_EQ(lv.grad().item(), 0.3);
  EXPECT_DOUBLE_EQ(ls.grad().item(), 0.7);
}

TEST(MiouTest, ReferenceCases) {
  const Tensor target = Tensor::from({1, 1, 2, 2}, {1, 1, 0, 0});
  const Tensor pred = Tensor::from({1, 1, 2, 2}, {5, -5, -5, -5});
  EXPECT_DOUBLE_EQ(miou(pred, target).mean, 0.5);

  const Tensor same = Tensor::from({1, 1, 2, 2}, {3, 3, -3, -3});
  EXPECT_EQ(miou(same, target).mean, 1.0);

  const Tensor disjoint = Tensor::from({1, 1, 2, 2}, {-3, -3, 3, 3});
  EXPECT_EQ(miou(disjoint, target).mean, 0.0);

  const Tensor empty_target(Shape{1, 1, 2, 2}, 0.0);
  EXPECT_EQ(miou(Tensor(Shape{1, 1, 2, 2}, -1.0), empty_target).mean, 1.0);
}

TEST(MiouTest, ThresholdIsStrictlyAboveHalf) {
  const Tensor target = Tensor::from({1, 1, 1, 2}, {1, 0});
  const auto r = miou(Tensor::from({1, 1, 1, 2}, {0.0, 0.0}), target);
  EXPECT_EQ(r.counts[0].tp, 0u);
  EXPECT_EQ(r.counts[0].fn, 1u);
}

TEST(MiouTest, SetFormEqualsConfusionFormAndCountsAddUp) {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t N = 1 + rng.below(3), K = 1 + rng.below(5), H = 1 + rng.below(6), W = 1 + rng.below(6);
    Tensor logits = fd::random_tensor({N, K, H, W}, rng, -2, 2);
    Tensor target(Shape{N, K, H, W});
    for (auto& v : target.data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    MiouAccumulator acc(K);
    acc.add(logits, target);
    const auto pc = acc.per_class();  // throws if the two forms disagree
    for (std::size_t k = 0; k < K; ++k) {
      EXPECT_EQ(pc[k], iou_confusion_form(acc.counts()[k]));
      EXPECT_EQ(acc.counts()[k].total(), N * H * W);
    }
  }
}

TEST(MiouTest, AccumulatesAcrossBatches) {
  Rng rng(22);
  Tensor a = fd::random_tensor({2, 3, 4, 4}, rng), b = fd::random_tensor({2, 3, 4, 4}, rng);
  Tensor ta(Shape{2, 3, 4, 4}), tb(Shape{2, 3, 4, 4});
  for (auto& v : ta.data()) v = rng.bernoulli(0.5);
  for (auto& v : tb.data()) v = rng.bernoulli(0.5);
  MiouAccumulator acc(3);
  acc.add(a, ta);
  acc.add(b, tb);
  Tensor ab(Shape{4, 3, 4, 4}), tab(Shape{4, 3, 4, 4});
  std::copy(a.data().begin(), a.data().end(), ab.ptr());
  std::copy(b.data().begin(), b.data().end(), ab.ptr() + a.size());
  std::copy(ta.data().begin(), ta.data().end(), tab.ptr());
  std::copy(tb.data().begin(), tb.data().end(), tab.ptr() + ta.size());
  EXPECT_EQ(acc.per_class(), miou(ab, tab).per_class);
}

TEST(AccuracyTest, OverallAndPerType) {
  const Tensor x = Tensor::from({4, 3}, {3, 0, 0, 0, 3, 0, 0, 0, 3, 3, 0, 0});
  const std::vector<std::size_t> y = {0, 1, 2, 0};
  const std::vector<QuestionType> types(4, QuestionType::YesNo);
  EXPECT_EQ(vqa_accuracy(x, y, types).overall(), 1.0);

  const std::vector<std::size_t> y2 = {0, 2};
  const Tensor x2 = Tensor::from({2, 3}, {3, 0, 0, 0, 3, 0});
  EXPECT_EQ(vqa_accuracy(x2, y2, std::vector<QuestionType>(2, QuestionType::SimpleCounting)).overall(), 0.5);
}

TEST(AccuracyTest, PerTypeRecomposesOverall) {
  Rng rng(31);
  const std::size_t N = 200, C = 6;
  const Tensor x = fd::random_tensor({N, C}, rng);
  std::vector<std::size_t> y(N);
  std::vector<QuestionType> types(N);
  for (std::size_t n = 0; n < N; ++n) {
    y[n] = rng.below(C);
    types[n] = kAllQuestionTypes[rng.below(3)];  // leave one type absent
  }
  const auto r = vqa_accuracy(x, y, types);
  double recomposed = 0.0;
  for (QuestionType t : kAllQuestionTypes) {
    const auto acc = r.for_type(t);
    if (acc) recomposed += *acc * static_cast<double>(r.type_total[question_type_index(t)]);
  }
  EXPECT_NEAR(recomposed / static_cast<double>(N), r.overall(), 1e-12);
  EXPECT_FALSE(r.for_type(QuestionType::ConditionRecognition).has_value());
}

TEST(AccuracyTest, UnknownQuestionTypeRejected) {
  EXPECT_THROW(parse_question_type("Colour"), ValidationError);
  EXPECT_EQ(parse_question_type("Yes/No"), QuestionType::YesNo);
  EXPECT_EQ(parse_question_type("Complex_Counting"), QuestionType::ComplexCounting);
  const Tensor x(Shape{1, 2});
  const std::vector<std::size_t> y = {0};
  const std::vector<QuestionType> bad = {static_cast<QuestionType>(9)};
  EXPECT_THROW(vqa_accuracy(x, y, bad), ValidationError);
}

TEST(AccuracyTest, ArgmaxIndependentOfClassWeights) {
  Rng rng(41);
  const Tensor x = fd::random_tensor({10, 4}, rng);
  std::vector<std::size_t> y(10);
  for (auto& v : y) v = rng.below(4);
  const std::vector<QuestionType> types(10, QuestionType::YesNo);
  const auto before = vqa_accuracy(x, y, types).correct;
  Tape tape;
  auto r1 = vqa_loss(tape.leaf(x), y, std::vector<double>{1, 1, 1, 1});
  auto r2 = vqa_loss(tape.leaf(x), y, std::vector<double>{0.1, 5, 2, 0.7});
  EXPECT_NE(r1.breakdown.l_vqa, r2.breakdown.l_vqa);
  EXPECT_EQ(vqa_accuracy(x, y, types).correct, before);
}
