#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "datwep/curriculum.hpp"
#include "datwep/losses.hpp"
#include "datwep/model.hpp"
#include "datwep/ops.hpp"
#include "datwep/rng.hpp"
#include "datwep/text.hpp"

namespace datwep::gradcheck {

/// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct CheckResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbations that crossed a relu or pooling decision
  double max_rel_err = 0.0;
  double tolerance = 0.0;

  bool passed() const { return checked > 0 && max_rel_err < tolerance; }

  void merge(double err) {
    max_rel_err = std::max(max_rel_err, err);
    ++checked;
  }
};

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

namespace detail {

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

struct Eval {
  double value;
  std::uint64_t kinks;
};

inline Eval evaluate(const Builder& build, const std::vector<Tensor>& inputs, const Tensor& coeffs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  Var out = ops::weighted_sum(build(tape, vars), coeffs);
  return {out.value().item(), tape.kink_signature()};
}

}  // namespace detail

/// Central differences on every input element of sum(coeffs * build(inputs)).
inline void check_builder(CheckResult& res, const Builder& build, const std::vector<Tensor>& inputs, Rng& rng,
                          double h = 1e-5) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  Var out = build(tape, vars);
  const Tensor coeffs = detail::random_tensor(out.shape(), rng);
  tape.backward(ops::weighted_sum(out, coeffs));
  const std::uint64_t kinks = tape.kink_signature();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = vars[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const auto ep = detail::evaluate(build, plus, coeffs);
      const auto em = detail::evaluate(build, minus, coeffs);
      if (ep.kinks != kinks || em.kinks != kinks) {
        ++res.skipped;
        continue;
      }
      res.merge(rel_err(analytic[i], (ep.value - em.value) / (2.0 * h)));
    }
  }
  ++res.cases;
}

/// Every differentiable primitive and both task losses, on `cases` random draws each.
inline std::vector<CheckResult> layer_suite(std::uint64_t seed = 1, std::size_t cases = 100, double tol = 1e-5) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  auto run = [&](const std::string& name, auto&& make) {
    CheckResult r{name};
    r.tolerance = tol;
    for (std::size_t c = 0; c < cases; ++c) {
      auto [build, inputs] = make();
      check_builder(r, build, inputs, rng);
    }
    out.push_back(r);
  };
  auto dim = [&](std::size_t lo, std::size_t hi) { return static_cast<std::size_t>(lo + rng.below(hi - lo + 1)); };
  using Case = std::pair<Builder, std::vector<Tensor>>;
  auto rt = [&](Shape s) { return detail::random_tensor(std::move(s), rng); };

  run("conv2d", [&]() -> Case {
    const std::size_t N = dim(1, 2), C = dim(1, 2), F = dim(1, 2), H = dim(1, 4), W = dim(1, 4);
    const std::size_t k = rng.bernoulli(0.5) ? 3 : 1;
    return {[](Tape&, const std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2]); },
            {rt({N, C, H, W}), rt({F, C, k, k}), rt({F})}};
  });
  run("maxpool2", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::maxpool2(v[0]); },
            {rt({dim(1, 2), dim(1, 2), 2 * dim(1, 2), 2 * dim(1, 2)})}};
  });
  run("upsample2", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::upsample2(v[0]); },
            {rt({dim(1, 2), dim(1, 2), dim(1, 3), dim(1, 3)})}};
  });
  run("linear", [&]() -> Case {
    const std::size_t N = dim(1, 4), I = dim(1, 5), O = dim(1, 4);
    return {[](Tape&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); },
            {rt({N, I}), rt({O, I}), rt({O})}};
  });
  run("relu", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::relu(v[0]); }, {rt({dim(1, 3), dim(1, 6)})}};
  });
  run("sigmoid", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::sigmoid(v[0]); }, {rt({dim(1, 3), dim(1, 6)})}};
  });
  run("softmax_rows", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::softmax_rows(v[0]); }, {rt({dim(1, 3), dim(2, 6)})}};
  });
  run("embedding", [&]() -> Case {
    const std::size_t V = dim(2, 6), D = dim(1, 4), L = dim(1, 5);
    std::vector<std::int64_t> ids(L);
    for (auto& i : ids) i = static_cast<std::int64_t>(rng.below(V));
    return {[ids, L](Tape&, const std::vector<Var>& v) { return ops::embedding_lookup(v[0], ids, Shape{L}); },
            {rt({V, D})}};
  });
  run("concat_channels", [&]() -> Case {
    const std::size_t N = dim(1, 2), H = dim(1, 3);
    return {[](Tape&, const std::vector<Var>& v) { return ops::concat_channels({v[0], v[1]}); },
            {rt({N, dim(1, 3), H, H}), rt({N, dim(1, 3), H, H})}};
  });
  run("global_avg_pool", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::global_avg_pool(v[0]); },
            {rt({dim(1, 2), dim(1, 3), dim(1, 3), dim(1, 3)})}};
  });
  run("elementwise_mul", [&]() -> Case {
    const Shape s{dim(1, 3), dim(1, 4)};
    return {[](Tape&, const std::vector<Var>& v) { return ops::elementwise_mul(v[0], v[1]); }, {rt(s), rt(s)}};
  });
  run("add", [&]() -> Case {
    const Shape s{dim(1, 3), dim(1, 4)};
    return {[](Tape&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); }, {rt(s), rt(s)}};
  });
  run("flatten", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::flatten(v[0]); }, {rt({dim(1, 2), dim(1, 3), dim(1, 3)})}};
  });
  run("channel_affine", [&]() -> Case {
    const std::size_t C = dim(1, 3);
    Tensor mean = rt({C}), var(Shape{C});
    for (auto& v : var.data()) v = rng.uniform(0.5, 2.0);
    return {[mean, var](Tape&, const std::vector<Var>& v) { return ops::channel_affine(v[0], v[1], v[2], mean, var, 1e-5); },
            {rt({dim(1, 2), C, dim(1, 3), dim(1, 3)}), rt({C}), rt({C})}};
  });
  run("batch_norm", [&]() -> Case {
    const std::size_t C = dim(1, 3);
    return {[](Tape&, const std::vector<Var>& v) { return ops::batch_norm(v[0], v[1], v[2], 1e-5); },
            {rt({dim(1, 2), C, dim(2, 3), dim(2, 3)}), rt({C}), rt({C})}};
  });
  run("gather_rows", [&]() -> Case {
    const std::size_t N = dim(1, 4);
    std::vector<std::size_t> rows(dim(1, 6));
    for (auto& r : rows) r = rng.below(N);
    return {[rows](Tape&, const std::vector<Var>& v) { return ops::gather_rows(v[0], rows); }, {rt({N, dim(1, 3)})}};
  });
  run("sum", [&]() -> Case {
    return {[](Tape&, const std::vector<Var>& v) { return ops::sum(v[0]); }, {rt({dim(1, 3), dim(1, 3)})}};
  });
  run("blend", [&]() -> Case {
    const double ca = rng.uniform(-2, 2), cb = rng.uniform(-2, 2);
    return {[ca, cb](Tape&, const std::vector<Var>& v) { return ops::blend(v[0], ca, v[1], cb); },
            {rt({1}), rt({1})}};
  });
  run("bce_seg_loss", [&]() -> Case {
    const Shape s{dim(1, 2), dim(1, 3), dim(1, 3), dim(1, 3)};
    Tensor t(s);
    for (auto& v : t.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    Tensor x = detail::random_tensor(s, rng, -4, 4);
    return {[t](Tape&, const std::vector<Var>& v) { return losses::bce_seg_loss(v[0], t); }, {x}};
  });
  run("vqa_loss", [&]() -> Case {
    const std::size_t N = dim(1, 6), C = dim(2, 6);
    std::vector<std::size_t> y(N);
    for (auto& v : y) v = rng.below(C);
    std::vector<double> w(C);
    for (auto& v : w) v = rng.uniform(0.2, 3.0);
    return {[y, w](Tape&, const std::vector<Var>& v) { return losses::vqa_loss(v[0], y, w).loss; },
            {detail::random_tensor({N, C}, rng, -3, 3)}};
  });
  return out;
}

/// Analytic alpha gradient against central differences of the blended loss plus regularizer.
inline CheckResult datap_suite(std::uint64_t seed = 2, std::size_t cases = 100, double tol = 1e-6,
                               const curriculum::SchedulerConfig& base = {}) {
  Rng rng(seed);
  CheckResult r{"datap_grad"};
  r.tolerance = tol;
  const double h = 1e-6;
  const std::vector<double> fixed = {-0.5, 0.1, 0.5, 0.9, 1.5};
  for (std::size_t c = 0; c < cases; ++c) {
    const double a = c < fixed.size() ? fixed[c] : rng.uniform(-1.0, 2.0);
    const double lv = rng.uniform(0.0, 3.0), ls = rng.uniform(0.0, 3.0);
    ++r.cases;
    if (std::abs(a - curriculum::scheduler_sigmoid(a, base.sigmoid_variant)) < 1e-4) {
      ++r.skipped;
      continue;
    }
    auto f = [&](double x) {
      return losses::total_loss(lv, ls, x, base.alpha_convention) +
             base.lambda_reg * curriculum::datap_regularizer(x, base.sigmoid_variant);
    };
    r.merge(rel_err(curriculum::datap_grad(a, lv, ls, base), (f(a + h) - f(a - h)) / (2.0 * h)));
  }
  return r;
}

/// The three-sample case: targets {0,0,1}, target probabilities {0.7,0.5,0.2}, unit weights.
inline losses::LossBreakdown dawep_reference_breakdown() {
  losses::LossBreakdown bd;
  bd.target_classes = {0, 0, 1};
  bd.per_sample_nll = {-std::log(0.7), -std::log(0.5), -std::log(0.2)};
  bd.class_weights_used = {1.0, 1.0};
  return bd;
}

/// Analytic class-weight gradients against central differences of the VQA loss in each weight.
inline CheckResult dawep_suite(std::uint64_t seed = 3, std::size_t cases = 100, double tol = 1e-6) {
  Rng rng(seed);
  CheckResult r{"dawep_grads"};
  r.tolerance = tol;
  const double h = 1e-6;
  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t N = 1 + rng.below(16), C = 2 + rng.below(7);
    const Tensor x = detail::random_tensor({N, C}, rng, -3, 3);
    std::vector<std::size_t> y(N);
    for (auto& v : y) v = rng.below(C);
    std::vector<double> w(C);
    for (auto& v : w) v = rng.uniform(0.2, 3.0);
    Tape tape;
    const auto g = curriculum::dawep_grads(losses::vqa_loss(tape.leaf(x), y, w).breakdown);
    for (std::size_t k = 0; k < C; ++k) {
      auto wp = w, wm = w;
      wp[k] += h;
      wm[k] -= h;
      r.merge(rel_err(g[k], (losses::vqa_loss_value(x, y, wp) - losses::vqa_loss_value(x, y, wm)) / (2.0 * h)));
    }
    ++r.cases;
  }
  return r;
}

/// Tiny multitask network for the end-to-end check.
inline model::ModelConfig end_to_end_config() {
  model::ModelConfig c;
  c.image_size = 8;
  c.base_channels = 2;
  c.n_seg_classes = 2;
  c.n_answer_classes = 3;
  c.vocab_size = text::Vocabulary::standard().size();
  c.l_max = 28;
  c.text_hidden = 6;
  c.fusion_hidden = 5;
  return c;
}

/// d(total loss)/d(parameter) for randomly chosen parameters against central differences.
inline CheckResult end_to_end(std::uint64_t seed = 4, std::size_t n_params = 120, double tol = 1e-4,
                              double alpha = 0.5) {
  const auto cfg = end_to_end_config();
  Rng rng(seed);
  model::ModelParams mp = model::init_params(cfg, seed);
  const auto vocab = text::Vocabulary::standard();
  const Tensor images = detail::random_tensor({2, 3, cfg.image_size, cfg.image_size}, rng, 0.0, 1.0);
  Tensor masks(Shape{2, cfg.n_seg_classes, cfg.image_size, cfg.image_size});
  for (auto& v : masks.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  const std::vector<text::TokenSequence> qs = {text::tokenize("how many buildings", vocab, cfg.l_max),
                                               text::tokenize("is the road flooded", vocab, cfg.l_max),
                                               text::tokenize("what is the condition", vocab, cfg.l_max)};
  const std::vector<std::size_t> image_of = {0, 1, 1}, answers = {2, 0, 1};
  const std::vector<double> weights = {1.0, 0.8, 1.3};

  auto loss_of = [&](model::ModelParams& p, std::uint64_t* kinks, std::vector<Tensor>* grads) {
    Tape tape;
    model::BoundParams bp(tape, p);
    auto seg = model::forward_seg(tape.constant(images), bp, p, cfg, model::Mode::Train);
    Var lseg = losses::bce_seg_loss(seg.logits, masks);
    Var logits = model::forward_vqa(tape, qs, image_of, seg.features, bp, cfg);
    Var lvqa = losses::vqa_loss(logits, answers, weights).loss;
    Var total = losses::total_loss(lvqa, lseg, alpha);
    if (grads) {
      tape.backward(total);
      for (const Var& v : bp.vars()) grads->push_back(v.grad());
    }
    if (kinks) *kinks = tape.kink_signature();
    return total.value().item();
  };

  std::vector<Tensor> grads;
  std::uint64_t base_kinks = 0;
  loss_of(mp, &base_kinks, &grads);

  CheckResult r{"end_to_end"};
  r.tolerance = tol;
  const double h = 1e-5;
  const std::size_t total = mp.count();
  std::size_t attempts = 0;
  while (r.checked < n_params && attempts < 20 * n_params) {
    ++attempts;
    std::size_t flat = rng.below(total), pi = 0;
    while (flat >= mp.params[pi].value.size()) flat -= mp.params[pi++].value.size();
    model::ModelParams plus = mp, minus = mp;
    plus.params[pi].value[flat] += h;
    minus.params[pi].value[flat] -= h;
    std::uint64_t kp = 0, km = 0;
    const double fp = loss_of(plus, &kp, nullptr), fm = loss_of(minus, &km, nullptr);
    ++r.cases;
    if (kp != base_kinks || km != base_kinks) {
      ++r.skipped;
      continue;
    }
    r.merge(rel_err(grads[pi][flat], (fp - fm) / (2.0 * h)));
  }
  return r;
}

}  // namespace datwep::gradcheck
