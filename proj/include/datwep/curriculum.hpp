#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "datwep/errors.hpp"
#include "datwep/losses.hpp"

namespace datwep::curriculum {

using losses::AlphaConvention;
using losses::LossBreakdown;

/// standard: 1/(1+e^-a).  negated: 1/(1+e^a).
enum class SigmoidVariant { Standard, Negated };

enum class UpdateCadence { PerBatch, PerEpochMean };

inline std::string_view sigmoid_variant_name(SigmoidVariant v) {
  return v == SigmoidVariant::Standard ? "standard" : "negated";
}

inline SigmoidVariant parse_sigmoid_variant(std::string_view s) {
  if (s == "standard") return SigmoidVariant::Standard;
  if (s == "negated") return SigmoidVariant::Negated;
  throw ValidationError("unknown sigmoid variant '" + std::string(s) + "'");
}

inline std::string_view cadence_name(UpdateCadence c) {
  return c == UpdateCadence::PerBatch ? "per-batch" : "per-epoch-mean";
}

inline UpdateCadence parse_cadence(std::string_view s) {
  if (s == "per-batch") return UpdateCadence::PerBatch;
  if (s == "per-epoch-mean") return UpdateCadence::PerEpochMean;
  throw ValidationError("unknown update cadence '" + std::string(s) + "'");
}

struct SchedulerConfig {
  double eps_datap = 0.002;
  double eps_dawep = 0.001;
  double lambda_reg = 0.75;
  double clip_min = -1.5;
  double clip_max = 1.5;
  double weight_floor = 1e-3;
  AlphaConvention alpha_convention = AlphaConvention::VqaWeighted;
  SigmoidVariant sigmoid_variant = SigmoidVariant::Standard;
  UpdateCadence cadence = UpdateCadence::PerBatch;

  void validate() const {
    if (!(eps_datap > 0.0) || !(eps_dawep > 0.0)) throw ValidationError("scheduler learning rates must be > 0");
    if (!(lambda_reg >= 0.0)) throw ValidationError("lambda_reg must be >= 0");
    if (!(clip_min < clip_max)) throw ValidationError("clip band requires min < max");
    if (!(weight_floor > 0.0)) throw ValidationError("weight floor must be > 0");
  }
};

/// Values in effect for one batch, before the scheduler moved them.
struct HistoryRecord {
  std::size_t step = 0;
  double alpha = 0.0;
  std::vector<double> weights;
  double l_seg = 0.0;
  double l_vqa = 0.0;
  double alpha_grad = 0.0;
  std::vector<double> weight_grads_raw;
  std::vector<double> weight_grads_clipped;
};

struct SchedulerState {
  double alpha = 0.5;
  std::vector<double> class_weights;
  std::size_t step_count = 0;
  std::vector<HistoryRecord> history;

  /// alpha = 0.5 and every class weight 1.
  static SchedulerState initial(std::size_t classes) {
    if (classes == 0) throw ValidationError("scheduler needs at least one class");
    SchedulerState s;
    s.class_weights.assign(classes, 1.0);
    return s;
  }
};

inline double scheduler_sigmoid(double a, SigmoidVariant v) {
  return v == SigmoidVariant::Standard ? 1.0 / (1.0 + std::exp(-a)) : 1.0 / (1.0 + std::exp(a));
}

/// d/da |a - s(a)|, with 0 at the kink.
inline double datap_reg_grad(double alpha, SigmoidVariant v = SigmoidVariant::Standard) {
  const double s = scheduler_sigmoid(alpha, v);
  const double diff = alpha - s;
  if (std::abs(diff) < 1e-12) return 0.0;
  const double sign = diff > 0.0 ? 1.0 : -1.0;
  // standard: s' = s - s^2; negated: s' = -(s - s^2)
  const double ds = v == SigmoidVariant::Standard ? s - s * s : -(s - s * s);
  return sign * (1.0 - ds);
}

/// |a - s(a)|
inline double datap_regularizer(double alpha, SigmoidVariant v = SigmoidVariant::Standard) {
  return std::abs(alpha - scheduler_sigmoid(alpha, v));
}

/// Point where a = s(a), found by bisection.
inline double regularizer_fixed_point(SigmoidVariant v = SigmoidVariant::Standard) {
  double lo = -2.0, hi = 2.0;
  auto f = [v](double a) { return a - scheduler_sigmoid(a, v); };
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if ((f(mid) > 0.0) == (f(hi) > 0.0)) hi = mid; else lo = mid;
  }
  return 0.5 * (lo + hi);
}

/// Derivative of the task-balanced total loss plus the scaled regularizer with respect to alpha.
inline double datap_grad(double alpha, double l_vqa, double l_seg, const SchedulerConfig& cfg) {
  const double task = cfg.alpha_convention == AlphaConvention::VqaWeighted ? l_vqa - l_seg : l_seg - l_vqa;
  return task + cfg.lambda_reg * datap_reg_grad(alpha, cfg.sigmoid_variant);
}

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw SchedulerError(std::string(what) + " is not finite");
}

/// d L_vqa / d w_k for every class, from the per-sample losses of one batch.
inline std::vector<double> dawep_grads(const LossBreakdown& bd) {
  const std::size_t C = bd.class_weights_used.size();
  const std::size_t N = bd.target_classes.size();
  if (C == 0) throw ValidationError("dawep_grads: no class weights in breakdown");
  if (bd.per_sample_nll.size() != N) throw ValidationError("dawep_grads: per-sample losses and targets differ in length");
  double W = 0.0, S = 0.0;
  std::vector<double> occ(C, 0.0), nll_sum(C, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t y = bd.target_classes[n];
    if (y >= C) throw ValidationError("dawep_grads: target class outside weight vector");
    const double w = bd.class_weights_used[y];
    W += w;
    S += w * bd.per_sample_nll[n];
    occ[y] += 1.0;
    nll_sum[y] += bd.per_sample_nll[n];
  }
  std::vector<double> g(C, 0.0);
  if (N == 0) return g;
  for (std::size_t k = 0; k < C; ++k) {
    if (occ[k] == 0.0) continue;
    g[k] = -occ[k] * S / (W * W) + nll_sum[k] / W;
  }
  return g;
}

inline double clip(double g, const SchedulerConfig& cfg) { return std::clamp(g, cfg.clip_min, cfg.clip_max); }

namespace detail {

inline double apply_datap(SchedulerState& st, double l_vqa, double l_seg, const SchedulerConfig& cfg) {
  require_finite(l_vqa, "VQA loss");
  require_finite(l_seg, "segmentation loss");
  const double g = datap_grad(st.alpha, l_vqa, l_seg, cfg);
  const double next = st.alpha - cfg.eps_datap * g;
  require_finite(next, "updated alpha");
  st.alpha = next;
  return g;
}

inline std::vector<double> apply_dawep(SchedulerState& st, std::span<const double> grads, const SchedulerConfig& cfg) {
  if (grads.size() != st.class_weights.size()) throw ValidationError("dawep_step: gradient length differs from weight count");
  for (double g : grads) require_finite(g, "class-weight gradient");
  std::vector<double> clipped(grads.size());
  for (std::size_t k = 0; k < grads.size(); ++k) {
    clipped[k] = clip(grads[k], cfg);
    st.class_weights[k] = std::max(cfg.weight_floor, st.class_weights[k] - cfg.eps_dawep * clipped[k]);
  }
  return clipped;
}

inline HistoryRecord begin_record(const SchedulerState& st, double l_vqa, double l_seg) {
  HistoryRecord r;
  r.step = st.step_count;
  r.alpha = st.alpha;
  r.weights = st.class_weights;
  r.l_seg = l_seg;
  r.l_vqa = l_vqa;
  return r;
}

inline void commit(SchedulerState& st, HistoryRecord r) {
  st.history.push_back(std::move(r));
  ++st.step_count;
}

}  // namespace detail

/// One alpha update on its own. Records a history row.
inline double datap_step(SchedulerState& st, double l_vqa, double l_seg, const SchedulerConfig& cfg) {
  SchedulerState next = st;
  auto rec = detail::begin_record(next, l_vqa, l_seg);
  rec.alpha_grad = detail::apply_datap(next, l_vqa, l_seg, cfg);
  detail::commit(next, std::move(rec));
  st = std::move(next);
  return st.alpha;
}

/// One class-weight update on its own. Records a history row.
inline const std::vector<double>& dawep_step(SchedulerState& st, std::span<const double> grads,
                                             const SchedulerConfig& cfg) {
  SchedulerState next = st;
  auto rec = detail::begin_record(next, 0.0, 0.0);
  rec.weight_grads_raw.assign(grads.begin(), grads.end());
  rec.weight_grads_clipped = detail::apply_dawep(next, grads, cfg);
  detail::commit(next, std::move(rec));
  st = std::move(next);
  return st.class_weights;
}

/// alpha update then class-weight update from one batch, as a single history row.
/// The state is left untouched if either sub-step throws.
inline void datwep_step(SchedulerState& st, const LossBreakdown& bd, const SchedulerConfig& cfg) {
  if (bd.class_weights_used.size() != st.class_weights.size()) {
    throw ValidationError("datwep_step: breakdown has " + std::to_string(bd.class_weights_used.size()) +
                          " class weights, scheduler has " + std::to_string(st.class_weights.size()));
  }
  SchedulerState next = st;
  auto rec = detail::begin_record(next, bd.l_vqa, bd.l_seg);
  rec.alpha_grad = detail::apply_datap(next, bd.l_vqa, bd.l_seg, cfg);
  rec.weight_grads_raw = dawep_grads(bd);
  rec.weight_grads_clipped = detail::apply_dawep(next, rec.weight_grads_raw, cfg);
  detail::commit(next, std::move(rec));
  st = std::move(next);
}

/// Collects batch breakdowns over an epoch for the per-epoch-mean cadence.
/// Losses are averaged over batches; per-sample terms are pooled.
class EpochAccumulator {
 public:
  void add(const LossBreakdown& bd) {
    if (batches_ == 0) {
      merged_.class_weights_used = bd.class_weights_used;
      merged_.alpha_used = bd.alpha_used;
    } else if (bd.class_weights_used != merged_.class_weights_used) {
      throw SchedulerError("class weights changed within an accumulated epoch");
    }
    seg_sum_ += bd.l_seg;
    vqa_sum_ += bd.l_vqa;
    merged_.per_sample_nll.insert(merged_.per_sample_nll.end(), bd.per_sample_nll.begin(), bd.per_sample_nll.end());
    merged_.target_classes.insert(merged_.target_classes.end(), bd.target_classes.begin(), bd.target_classes.end());
    ++batches_;
  }

  bool empty() const noexcept { return batches_ == 0; }

  LossBreakdown merged() const {
    if (batches_ == 0) throw SchedulerError("no batches accumulated");
    LossBreakdown out = merged_;
    out.l_seg = seg_sum_ / static_cast<double>(batches_);
    out.l_vqa = vqa_sum_ / static_cast<double>(batches_);
    out.l_total = losses::total_loss(out.l_vqa, out.l_seg, out.alpha_used);
    return out;
  }

  void clear() { *this = EpochAccumulator{}; }

 private:
  LossBreakdown merged_;
  double seg_sum_ = 0.0, vqa_sum_ = 0.0;
  std::size_t batches_ = 0;
};

/// step, alpha, l_seg, l_vqa, w_0 ... w_{C-1}; one row per history record.
inline void write_history_csv(std::ostream& os, const SchedulerState& st) {
  const std::size_t C = st.class_weights.size();
  os << "step,alpha,l_seg,l_vqa";
  for (std::size_t k = 0; k < C; ++k) os << ",w_" << k;
  os << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : st.history) {
    os << r.step << ',' << num(r.alpha) << ',' << num(r.l_seg) << ',' << num(r.l_vqa);
    for (double w : r.weights) os << ',' << num(w);
    os << '\n';
  }
}

}  // namespace datwep::curriculum
