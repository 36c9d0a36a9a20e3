#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "datwep/ops.hpp"
#include "datwep/question_type.hpp"

namespace datwep::losses {

/// Which loss the task-balance parameter multiplies.
///  VqaWeighted: total = alpha * L_vqa + (1 - alpha) * L_seg   (default)
///  SegWeighted: total = alpha * L_seg + (1 - alpha) * L_vqa
enum class AlphaConvention { VqaWeighted, SegWeighted };

inline std::string_view alpha_convention_name(AlphaConvention c) {
  return c == AlphaConvention::VqaWeighted ? "vqa-weighted" : "seg-weighted";
}

inline AlphaConvention parse_alpha_convention(std::string_view s) {
  if (s == "vqa-weighted" || s == "eq9") return AlphaConvention::VqaWeighted;
  if (s == "seg-weighted" || s == "algorithm1") return AlphaConvention::SegWeighted;
  throw ValidationError("unknown alpha convention '" + std::string(s) + "'");
}

/// Per-batch loss values plus everything the class-weight update needs.
struct LossBreakdown {
  double l_seg = 0.0;
  double l_vqa = 0.0;
  double l_total = 0.0;
  double alpha_used = 0.5;
  std::vector<double> per_sample_nll;      // -log softmax(x_n)[y_n]
  std::vector<std::size_t> target_classes;  // y_n
  std::vector<double> class_weights_used;   // one per answer class
};

inline double total_loss(double l_vqa, double l_seg, double alpha,
                         AlphaConvention conv = AlphaConvention::VqaWeighted) {
  return conv == AlphaConvention::VqaWeighted ? alpha * l_vqa + (1.0 - alpha) * l_seg
                                              : alpha * l_seg + (1.0 - alpha) * l_vqa;
}

inline Var total_loss(Var l_vqa, Var l_seg, double alpha,
                      AlphaConvention conv = AlphaConvention::VqaWeighted) {
  return conv == AlphaConvention::VqaWeighted ? ops::blend(l_vqa, alpha, l_seg, 1.0 - alpha)
                                              : ops::blend(l_seg, alpha, l_vqa, 1.0 - alpha);
}

// ---------------------------------------------------------------------------
// Segmentation: binary cross-entropy over every pixel of every mask channel.

inline void require_binary(const Tensor& target) {
  for (double v : target.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError("segmentation target must be binary (0 or 1)");
  }
}

/// -[t log s(x) + (1-t) log(1-s(x))] in the overflow-free form
/// max(x,0) - x t + log(1 + exp(-|x|)).
inline double bce_with_logit(double x, double t) {
  return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
}

inline double bce_seg_loss_value(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("bce_seg_loss shape mismatch: " + shape_str(logits.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  require_binary(target);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += bce_with_logit(logits[i], target[i]);
  return s / static_cast<double>(logits.size());
}

/// Mean BCE of sigmoid(logits) against binary masks, as a tape scalar.
inline Var bce_seg_loss(Var logits, const Tensor& target) {
  const double value = bce_seg_loss_value(logits.value(), target);
  const std::size_t xid = logits.id;
  Tensor t = target;
  return logits.tape->record(OpKind::BceWithLogits, Tensor::scalar(value), {xid},
                             [xid, t = std::move(t)](Tape& tp, std::size_t self) {
                               const double g = tp.grad_buffer(self)[0];
                               const Tensor& X = tp.value(xid);
                               Tensor& dX = tp.grad_buffer(xid);
                               const double k = g / static_cast<double>(X.size());
                               for (std::size_t i = 0; i < X.size(); ++i)
                                 dX[i] += k * (ops::logistic(X[i]) - t[i]);
                             });
}

// ---------------------------------------------------------------------------
// VQA: class-weighted cross-entropy normalised by the batch's summed target weights.

inline void validate_vqa_inputs(const Tensor& logits, std::span<const std::size_t> targets,
                                std::span<const double> weights) {
  require_rank(logits, 2, "vqa_loss logits");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  if (targets.size() != N) throw ShapeError("vqa_loss: one target per logit row required");
  if (weights.size() != C) throw ShapeError("vqa_loss: one weight per answer class required");
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw ValidationError("vqa_loss: class weights must be finite and > 0");
    }
  }
  for (std::size_t y : targets) {
    if (y >= C) throw IndexError("vqa_loss: target class " + std::to_string(y) + " >= " + std::to_string(C));
  }
  if (N == 0) throw ValidationError("vqa_loss: empty batch");
}

/// -log softmax(x_n)[y_n] for each row.
inline std::vector<double> per_sample_nll(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  std::vector<double> nll(N);
  for (std::size_t n = 0; n < N; ++n) {
    const double* x = logits.ptr() + n * C;
    const double m = *std::max_element(x, x + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c] - m);
    nll[n] = (m + std::log(z)) - x[targets[n]];
  }
  return nll;
}

/// sum_n w[y_n] * nll_n / sum_n w[y_n] from precomputed per-sample losses.
inline double weighted_nll(std::span<const double> nll, std::span<const std::size_t> targets,
                           std::span<const double> weights) {
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < nll.size(); ++n) {
    num += weights[targets[n]] * nll[n];
    den += weights[targets[n]];
  }
  return num / den;
}

inline double vqa_loss_value(const Tensor& logits, std::span<const std::size_t> targets,
                             std::span<const double> weights) {
  validate_vqa_inputs(logits, targets, weights);
  const auto nll = per_sample_nll(logits, targets);
  return weighted_nll(nll, targets, weights);
}

struct VqaLoss {
  Var loss;
  LossBreakdown breakdown;  // l_vqa, per_sample_nll, target_classes, class_weights_used
};

inline VqaLoss vqa_loss(Var logits, std::span<const std::size_t> targets,
                        std::span<const double> weights) {
  const Tensor& X = logits.value();
  validate_vqa_inputs(X, targets, weights);
  LossBreakdown bd;
  bd.per_sample_nll = per_sample_nll(X, targets);
  bd.target_classes.assign(targets.begin(), targets.end());
  bd.class_weights_used.assign(weights.begin(), weights.end());
  bd.l_vqa = weighted_nll(bd.per_sample_nll, targets, weights);

  const std::size_t N = X.dim(0), C = X.dim(1);
  double wsum = 0.0;
  for (std::size_t y : targets) wsum += weights[y];
  // d/dx_n = (w[y_n] / W) * (softmax(x_n) - onehot(y_n))
  std::vector<double> row_scale(N);
  for (std::size_t n = 0; n < N; ++n) row_scale[n] = weights[targets[n]] / wsum;
  const std::size_t xid = logits.id;
  std::vector<std::size_t> ys(targets.begin(), targets.end());
  Var loss = logits.tape->record(
      OpKind::WeightedCrossEntropy, Tensor::scalar(bd.l_vqa), {xid},
      [=, ys = std::move(ys), row_scale = std::move(row_scale)](Tape& tp, std::size_t self) {
        const double g = tp.grad_buffer(self)[0];
        const Tensor& Xv = tp.value(xid);
        Tensor& dX = tp.grad_buffer(xid);
        for (std::size_t n = 0; n < N; ++n) {
          const double* x = Xv.ptr() + n * C;
          const double m = *std::max_element(x, x + C);
          double z = 0.0;
          for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c] - m);
          const double k = g * row_scale[n];
          for (std::size_t c = 0; c < C; ++c) {
            const double p = std::exp(x[c] - m) / z;
            dX[n * C + c] += k * (p - (c == ys[n] ? 1.0 : 0.0));
          }
        }
      });
  return {loss, std::move(bd)};
}

// ---------------------------------------------------------------------------
// Segmentation metric.

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const noexcept { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// |P ∩ P̂| / (|P| + |P̂| - |P ∩ P̂|) counted from pixel sets; 1.0 when both masks are empty.
inline double iou_set_form(std::uint64_t target_pixels, std::uint64_t predicted_pixels,
                           std::uint64_t intersection) {
  const std::uint64_t uni = target_pixels + predicted_pixels - intersection;
  if (uni == 0) return 1.0;
  return static_cast<double>(intersection) / static_cast<double>(uni);
}

/// TP / (TP + FP + FN); 1.0 when the class is absent from both.
inline double iou_confusion_form(const ConfusionCounts& c) {
  const std::uint64_t den = c.tp + c.fp + c.fn;
  if (den == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(den);
}

/// Accumulates per-class confusion counts from thresholded sigmoid outputs.
class MiouAccumulator {
 public:
  explicit MiouAccumulator(std::size_t classes)
      : counts_(classes), target_px_(classes, 0), pred_px_(classes, 0), inter_px_(classes, 0) {}

  void add(const Tensor& logits, const Tensor& target) {
    require_rank(logits, 4, "miou logits");
    if (logits.shape() != target.shape()) throw ShapeError("miou shape mismatch");
    const std::size_t N = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    if (K != counts_.size()) throw ShapeError("miou class count mismatch");
    require_binary(target);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t off = (n * K + k) * HW;
        ConfusionCounts c;
        std::uint64_t tp_set = 0, pp_set = 0, ii_set = 0;
        for (std::size_t i = 0; i < HW; ++i) {
          const bool pred = ops::logistic(logits[off + i]) > 0.5;
          const bool truth = target[off + i] == 1.0;
          c.tp += pred && truth;
          c.fp += pred && !truth;
          c.fn += !pred && truth;
          c.tn += !pred && !truth;
          tp_set += truth;
          pp_set += pred;
          ii_set += pred && truth;
        }
        counts_[k] += c;
        target_px_[k] += tp_set;
        pred_px_[k] += pp_set;
        inter_px_[k] += ii_set;
      }
    }
  }

  const std::vector<ConfusionCounts>& counts() const noexcept { return counts_; }

  /// Per-class IoU from the set form; throws if the confusion form disagrees.
  std::vector<double> per_class() const {
    std::vector<double> out(counts_.size());
    for (std::size_t k = 0; k < counts_.size(); ++k) {
      out[k] = iou_set_form(target_px_[k], pred_px_[k], inter_px_[k]);
      if (out[k] != iou_confusion_form(counts_[k])) {
        throw std::logic_error("IoU set form and TP/FP/FN form disagree");
      }
    }
    return out;
  }

  double mean() const {
    const auto pc = per_class();
    double s = 0.0;
    for (double v : pc) s += v;
    return pc.empty() ? 0.0 : s / static_cast<double>(pc.size());
  }

 private:
  std::vector<ConfusionCounts> counts_;
  std::vector<std::uint64_t> target_px_, pred_px_, inter_px_;
};

struct MiouResult {
  std::vector<double> per_class;
  double mean = 0.0;
  std::vector<ConfusionCounts> counts;
};

inline MiouResult miou(const Tensor& logits, const Tensor& target) {
  MiouAccumulator acc(logits.rank() == 4 ? logits.dim(1) : 0);
  acc.add(logits, target);
  return {acc.per_class(), acc.mean(), acc.counts()};
}

// ---------------------------------------------------------------------------
// VQA metric.

inline std::size_t argmax_row(const Tensor& logits, std::size_t n) {
  const std::size_t C = logits.dim(1);
  const double* x = logits.ptr() + n * C;
  return static_cast<std::size_t>(std::max_element(x, x + C) - x);
}

struct AccuracyReport {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::array<std::size_t, kQuestionTypeCount> type_correct{};
  std::array<std::size_t, kQuestionTypeCount> type_total{};

  double overall() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }

  /// Accuracy within one question type; empty when the type did not occur.
  std::optional<double> for_type(QuestionType t) const {
    const auto i = question_type_index(t);
    if (type_total[i] == 0) return std::nullopt;
    return static_cast<double>(type_correct[i]) / static_cast<double>(type_total[i]);
  }

  AccuracyReport& operator+=(const AccuracyReport& o) {
    correct += o.correct;
    total += o.total;
    for (std::size_t i = 0; i < kQuestionTypeCount; ++i) {
      type_correct[i] += o.type_correct[i];
      type_total[i] += o.type_total[i];
    }
    return *this;
  }
};

/// Top-1 accuracy overall and per question type.
inline AccuracyReport vqa_accuracy(const Tensor& logits, std::span<const std::size_t> targets,
                                   std::span<const QuestionType> types) {
  require_rank(logits, 2, "vqa_accuracy logits");
  const std::size_t N = logits.dim(0);
  if (targets.size() != N || types.size() != N) {
    throw ShapeError("vqa_accuracy: one target and one question type per row required");
  }
  AccuracyReport r;
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t ti = question_type_index(types[n]);
    const bool ok = argmax_row(logits, n) == targets[n];
    r.correct += ok;
    ++r.total;
    r.type_correct[ti] += ok;
    ++r.type_total[ti];
  }
  return r;
}

}  // namespace datwep::losses
