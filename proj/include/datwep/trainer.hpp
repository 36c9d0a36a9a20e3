#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "datwep/checkpoint.hpp"
#include "datwep/curriculum.hpp"
#include "datwep/data.hpp"
#include "datwep/losses.hpp"
#include "datwep/model.hpp"
#include "datwep/optim.hpp"
#include "datwep/svg_plot.hpp"
#include "datwep/text.hpp"

#ifndef DATWEP_REVISION
#define DATWEP_REVISION "unknown"
#endif

namespace datwep::trainer {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum class DataKind { Synthetic, Directory };

inline std::string_view data_kind_name(DataKind k) { return k == DataKind::Synthetic ? "synthetic" : "directory"; }

struct DataSource {
  DataKind kind = DataKind::Synthetic;
  std::size_t n_images = 256;  // synthetic only
  std::uint64_t seed = 7;      // synthetic only
  data::SynthConfig synth;     // image_size is taken from the model config
  std::string directory;       // directory only
  data::SplitSpec split;
};

struct RunConfig {
  model::ModelConfig model;
  curriculum::SchedulerConfig scheduler;
  double lr = 1e-3;
  double lr_factor = 0.95;
  std::size_t lr_interval = 3;
  double weight_decay = 0.01;
  double grad_clip_norm = 0.0;
  std::size_t epochs = 25;
  std::size_t batch_size = 8;  // images per batch; every question of those images is included
  std::uint64_t seed = 1;
  DataSource data;
  std::string out_dir = "run";

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    optim::StepSchedule{lr, lr_factor, lr_interval}.validate();
    optim::AdamWConfig{lr, 0.9, 0.999, 1e-8, weight_decay, grad_clip_norm}.validate();
    scheduler.validate();
    data.split.validate();
    if (data.kind == DataKind::Synthetic) {
      data.synth.validate();
      if (data.n_images < 3) throw ValidationError("synthetic data needs at least 3 images");
    } else if (data.directory.empty()) {
      throw ValidationError("directory data source needs a path");
    }
    if (out_dir.empty()) throw ValidationError("output directory must be set");
  }

  optim::StepSchedule schedule() const { return {lr, lr_factor, lr_interval}; }
};

inline json to_json(const RunConfig& c) {
  const auto& d = c.data;
  return {{"model", checkpoint::to_json(c.model)},
          {"scheduler", checkpoint::to_json(c.scheduler)},
          {"optimizer",
           {{"name", "adamw"},
            {"lr", c.lr},
            {"lr_factor", c.lr_factor},
            {"lr_interval", c.lr_interval},
            {"weight_decay", c.weight_decay},
            {"grad_clip_norm", c.grad_clip_norm}}},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"data",
           {{"kind", std::string(data_kind_name(d.kind))},
            {"n_images", d.n_images},
            {"seed", d.seed},
            {"max_buildings", d.synth.max_buildings},
            {"p_building_flooded", d.synth.p_building_flooded},
            {"p_road_flooded", d.synth.p_road_flooded},
            {"p_pool", d.synth.p_pool},
            {"noise", d.synth.noise},
            {"directory", d.directory},
            {"split", {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}, {"seed", d.split.seed}}}}},
          {"out_dir", c.out_dir}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  c.model = checkpoint::model_config_from_json(j.at("model"));
  c.scheduler = checkpoint::scheduler_config_from_json(j.at("scheduler"));
  const auto& o = j.at("optimizer");
  c.lr = o.at("lr").get<double>();
  c.lr_factor = o.at("lr_factor").get<double>();
  c.lr_interval = o.at("lr_interval").get<std::size_t>();
  c.weight_decay = o.at("weight_decay").get<double>();
  c.grad_clip_norm = o.at("grad_clip_norm").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& d = j.at("data");
  const auto kind = d.at("kind").get<std::string>();
  if (kind == "synthetic") c.data.kind = DataKind::Synthetic;
  else if (kind == "directory") c.data.kind = DataKind::Directory;
  else throw ValidationError("unknown data source '" + kind + "'");
  c.data.n_images = d.at("n_images").get<std::size_t>();
  c.data.seed = d.at("seed").get<std::uint64_t>();
  c.data.synth.max_buildings = d.at("max_buildings").get<std::size_t>();
  c.data.synth.p_building_flooded = d.at("p_building_flooded").get<double>();
  c.data.synth.p_road_flooded = d.at("p_road_flooded").get<double>();
  c.data.synth.p_pool = d.at("p_pool").get<double>();
  c.data.synth.noise = d.at("noise").get<int>();
  c.data.directory = d.at("directory").get<std::string>();
  const auto& s = d.at("split");
  c.data.split = {s.at("train").get<double>(), s.at("val").get<double>(), s.at("test").get<double>(),
                  s.at("seed").get<std::uint64_t>()};
  c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

// ---------------------------------------------------------------------------
// Data.

struct RunData {
  data::Splits splits;
  std::vector<std::string> answers;
  std::vector<std::string> class_names;
  std::vector<std::string> warnings;
};

inline RunData load_run_data(const RunConfig& cfg) {
  data::Dataset ds;
  std::vector<std::string> names;
  if (cfg.data.kind == DataKind::Synthetic) {
    auto sc = cfg.data.synth;
    sc.image_size = cfg.model.image_size;
    ds = data::generate_synthetic(cfg.data.n_images, sc, cfg.data.seed);
    names = data::synthetic_class_names();
  } else {
    ds = data::load_dataset_dir(cfg.data.directory, {cfg.model.image_size, cfg.model.n_seg_classes});
    for (std::size_t k = 0; k < ds.n_seg_classes; ++k) names.push_back("class_" + std::to_string(k));
  }
  RunData rd;
  rd.answers = ds.answers;
  rd.class_names = std::move(names);
  rd.warnings = ds.warnings;
  rd.splits = data::split(ds, cfg.data.split);
  return rd;
}

/// Model config with the class counts fixed by the data.
inline model::ModelConfig resolve_model(model::ModelConfig m, const RunData& rd) {
  m.n_answer_classes = rd.answers.size();
  m.n_seg_classes = rd.class_names.size();
  m.vocab_size = text::Vocabulary::standard().size();
  m.validate();
  return m;
}

struct Batch {
  Tensor images;  // [B,3,H,W]
  Tensor masks;   // [B,K,H,W]
  std::vector<text::TokenSequence> questions;
  std::vector<std::size_t> image_of;
  std::vector<std::size_t> answers;
  std::vector<QuestionType> types;
};

inline Batch make_batch(std::span<const data::Sample* const> samples, const text::Vocabulary& vocab,
                        std::size_t l_max) {
  if (samples.empty()) throw ValidationError("empty batch");
  const Shape is = samples[0]->image.shape(), ms = samples[0]->masks.shape();
  const std::size_t B = samples.size();
  Batch b;
  b.images = Tensor(Shape{B, is[0], is[1], is[2]});
  b.masks = Tensor(Shape{B, ms[0], ms[1], ms[2]});
  for (std::size_t i = 0; i < B; ++i) {
    const auto& s = *samples[i];
    if (s.image.shape() != is || s.masks.shape() != ms) throw ShapeError("batch samples differ in geometry");
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.ptr() + i * s.image.size());
    std::copy(s.masks.data().begin(), s.masks.data().end(), b.masks.ptr() + i * s.masks.size());
    for (const auto& q : s.qa) {
      b.questions.push_back(text::tokenize(q.question, vocab, l_max));
      b.image_of.push_back(i);
      b.answers.push_back(q.answer);
      b.types.push_back(q.type);
    }
  }
  if (b.questions.empty()) throw ValidationError("batch contains no questions");
  return b;
}

/// Consecutive groups of at most `batch_size` samples, in the given order.
inline std::vector<std::vector<const data::Sample*>> batches(const std::vector<const data::Sample*>& order,
                                                             std::size_t batch_size) {
  std::vector<std::vector<const data::Sample*>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass and metrics.

struct Forward {
  Var total;
  Var l_seg;
  losses::VqaLoss vqa;
  Var seg_logits;
  Var answer_logits;
};

inline Forward forward(Tape& tape, const Batch& b, const model::BoundParams& bp, model::ModelParams& mp,
                       const model::ModelConfig& cfg, double alpha, std::span<const double> weights,
                       losses::AlphaConvention conv, model::Mode mode) {
  auto seg = model::forward_seg(tape.constant(b.images), bp, mp, cfg, mode);
  Var l_seg = losses::bce_seg_loss(seg.logits, b.masks);
  Var logits = model::forward_vqa(tape, b.questions, b.image_of, seg.features, bp, cfg);
  auto vqa = losses::vqa_loss(logits, b.answers, weights);
  Var total = losses::total_loss(vqa.loss, l_seg, alpha, conv);
  vqa.breakdown.l_seg = l_seg.value().item();
  vqa.breakdown.l_total = total.value().item();
  vqa.breakdown.alpha_used = alpha;
  return {total, l_seg, std::move(vqa), seg.logits, logits};
}

struct SplitMetrics {
  double l_seg = 0.0;
  double l_vqa = 0.0;
  double l_total = 0.0;
  double miou = 0.0;
  std::vector<double> miou_per_class;
  losses::AccuracyReport accuracy;
};

/// Accumulates batch results into split-level metrics.
class SplitAccumulator {
 public:
  explicit SplitAccumulator(std::size_t seg_classes) : miou_(seg_classes) {}

  void add(const Forward& f, const Batch& b) {
    const double px = static_cast<double>(b.masks.size());
    seg_px_ += px;
    seg_sum_ += f.vqa.breakdown.l_seg * px;
    vqa_sum_ += f.vqa.breakdown.l_vqa;
    total_sum_ += f.vqa.breakdown.l_total;
    nll_.insert(nll_.end(), f.vqa.breakdown.per_sample_nll.begin(), f.vqa.breakdown.per_sample_nll.end());
    targets_.insert(targets_.end(), b.answers.begin(), b.answers.end());
    ++batches_;
    miou_.add(f.seg_logits.value(), b.masks);
    acc_ += losses::vqa_accuracy(f.answer_logits.value(), b.answers, b.types);
  }

  /// batch_mean: losses are means of batch losses (training). Otherwise they are
  /// recomputed over the whole split: pixel-mean BCE and one weighted CE over all questions.
  SplitMetrics result(bool batch_mean, double alpha, std::span<const double> weights,
                      losses::AlphaConvention conv) const {
    SplitMetrics m;
    if (batches_ == 0) throw ValidationError("no batches evaluated");
    if (batch_mean) {
      const double n = static_cast<double>(batches_);
      m.l_seg = seg_batch_mean_sum_ / n;
      m.l_vqa = vqa_sum_ / n;
      m.l_total = total_sum_ / n;
    } else {
      m.l_seg = seg_sum_ / seg_px_;
      m.l_vqa = losses::weighted_nll(nll_, targets_, weights);
      m.l_total = losses::total_loss(m.l_vqa, m.l_seg, alpha, conv);
    }
    m.miou_per_class = miou_.per_class();
    m.miou = miou_.mean();
    m.accuracy = acc_;
    return m;
  }

  void add_batch_seg(double l_seg) { seg_batch_mean_sum_ += l_seg; }

 private:
  losses::MiouAccumulator miou_;
  losses::AccuracyReport acc_;
  double seg_px_ = 0.0, seg_sum_ = 0.0, seg_batch_mean_sum_ = 0.0, vqa_sum_ = 0.0, total_sum_ = 0.0;
  std::vector<double> nll_;
  std::vector<std::size_t> targets_;
  std::size_t batches_ = 0;
};

/// Evaluation-mode metrics of a fixed model on a set of samples.
inline SplitMetrics evaluate(const model::ModelParams& params, const model::ModelConfig& cfg,
                             const std::vector<data::Sample>& samples, double alpha, std::span<const double> weights,
                             losses::AlphaConvention conv, std::size_t batch_size = 8) {
  if (samples.empty()) throw ValidationError("nothing to evaluate");
  for (const auto& s : samples) {
    if (s.image.shape() != Shape{3, cfg.image_size, cfg.image_size} ||
        s.masks.shape() != Shape{cfg.n_seg_classes, cfg.image_size, cfg.image_size}) {
      throw ShapeError("sample " + s.id + " does not match the model geometry (" + std::to_string(cfg.image_size) +
                       "px, " + std::to_string(cfg.n_seg_classes) + " classes)");
    }
    for (const auto& q : s.qa)
      if (q.answer >= cfg.n_answer_classes) throw IndexError("answer index outside the model's answer table");
  }
  if (weights.size() != cfg.n_answer_classes) throw ShapeError("one class weight per answer class required");
  model::ModelParams mp = params;
  const auto vocab = text::Vocabulary::standard();
  std::vector<const data::Sample*> order;
  for (const auto& s : samples) order.push_back(&s);
  SplitAccumulator acc(cfg.n_seg_classes);
  for (const auto& group : batches(order, batch_size)) {
    const Batch b = make_batch(group, vocab, cfg.l_max);
    Tape tape;
    model::BoundParams bp(tape, mp);
    const Forward f = forward(tape, b, bp, mp, cfg, alpha, weights, conv, model::Mode::Eval);
    acc.add(f, b);
  }
  return acc.result(false, alpha, weights, conv);
}

// ---------------------------------------------------------------------------
// Metrics log.

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double alpha = 0.0;            // at epoch end
  std::vector<double> weights;   // at epoch end
  SplitMetrics train;            // training-mode batch outputs, before each update
  SplitMetrics val;              // evaluation mode with the epoch-end snapshot
};

struct MetricsLog {
  std::vector<std::string> class_names;
  std::vector<EpochMetrics> rows;

  void write_csv(std::ostream& os) const {
    const std::size_t C = rows.empty() ? 0 : rows[0].weights.size();
    os << "epoch,lr,alpha";
    for (const char* split : {"train", "val"}) {
      for (const char* f : {"l_seg", "l_vqa", "l_total", "miou"}) os << ',' << split << '_' << f;
      for (const auto& n : class_names) os << ',' << split << "_iou_" << n;
      os << ',' << split << "_acc";
      for (auto t : kAllQuestionTypes) os << ',' << split << "_acc_" << question_type_tag(t);
    }
    for (std::size_t k = 0; k < C; ++k) os << ",w_" << k;
    os << '\n';
    for (const auto& r : rows) {
      os << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.alpha);
      for (const SplitMetrics* m : {&r.train, &r.val}) {
        os << ',' << fmt(m->l_seg) << ',' << fmt(m->l_vqa) << ',' << fmt(m->l_total) << ',' << fmt(m->miou);
        for (double v : m->miou_per_class) os << ',' << fmt(v);
        os << ',' << fmt(m->accuracy.overall());
        for (auto t : kAllQuestionTypes) {
          os << ',';
          if (auto a = m->accuracy.for_type(t)) os << fmt(*a);
        }
      }
      for (double w : r.weights) os << ',' << fmt(w);
      os << '\n';
    }
  }

  static std::string fmt(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", v);
    return b;
  }
};

inline void print_split(std::ostream& os, const std::string& title, const SplitMetrics& m,
                        const std::vector<std::string>& class_names) {
  char line[160];
  os << title << '\n';
  std::snprintf(line, sizeof line, "  l_seg %.6f  l_vqa %.6f  l_total %.6f\n", m.l_seg, m.l_vqa, m.l_total);
  os << line;
  std::snprintf(line, sizeof line, "  mIoU %.4f\n", m.miou);
  os << line;
  for (std::size_t k = 0; k < m.miou_per_class.size(); ++k) {
    std::snprintf(line, sizeof line, "    %-22s %.4f\n", class_names.at(k).c_str(), m.miou_per_class[k]);
    os << line;
  }
  std::snprintf(line, sizeof line, "  accuracy %.4f (%zu/%zu)\n", m.accuracy.overall(), m.accuracy.correct,
                m.accuracy.total);
  os << line;
  for (auto t : kAllQuestionTypes) {
    const auto a = m.accuracy.for_type(t);
    const auto i = question_type_index(t);
    if (a) {
      std::snprintf(line, sizeof line, "    %-22s %.4f (%zu/%zu)\n", std::string(question_type_label(t)).c_str(), *a,
                    m.accuracy.type_correct[i], m.accuracy.type_total[i]);
    } else {
      std::snprintf(line, sizeof line, "    %-22s -\n", std::string(question_type_label(t)).c_str());
    }
    os << line;
  }
}

// ---------------------------------------------------------------------------
// Training.

struct RunResult {
  RunConfig config;  // with the resolved model config
  MetricsLog log;
  model::ModelParams params;
  curriculum::SchedulerState scheduler;
  std::vector<std::string> answers;
  std::size_t batches_per_epoch = 0;
  std::size_t total_batches = 0;
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + p.string());
  os << s;
}

inline checkpoint::Checkpoint make_checkpoint(const RunConfig& cfg, std::size_t epoch, const model::ModelParams& mp,
                                              const curriculum::SchedulerState& st, const optim::AdamW& opt,
                                              const RunData& rd) {
  checkpoint::Checkpoint ck;
  ck.run = to_json(cfg);
  ck.model_config = cfg.model;
  ck.seed = cfg.seed;
  ck.epoch = epoch;
  ck.answers = rd.answers;
  ck.class_names = rd.class_names;
  ck.params = mp;
  ck.alpha = st.alpha;
  ck.class_weights = st.class_weights;
  ck.scheduler_steps = st.step_count;
  ck.optimizer_steps = opt.steps();
  ck.adam_m = opt.first_moments();
  ck.adam_v = opt.second_moments();
  return ck;
}

inline void write_plots(const fs::path& dir, const MetricsLog& log, const curriculum::SchedulerState& st,
                        std::size_t batches_per_epoch, const std::vector<std::string>& answers) {
  fs::create_directories(dir);
  const double per = static_cast<double>(std::max<std::size_t>(batches_per_epoch, 1));
  svg::Series a{"alpha", {}, {}};
  std::vector<svg::Series> w(st.class_weights.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k].name = "w[" + answers.at(k) + "]";
  for (const auto& r : st.history) {
    const double x = static_cast<double>(r.step) / per;
    a.x.push_back(x);
    a.y.push_back(r.alpha);
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k].x.push_back(x);
      w[k].y.push_back(r.weights[k]);
    }
  }
  a.x.push_back(static_cast<double>(st.step_count) / per);
  a.y.push_back(st.alpha);
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k].x.push_back(static_cast<double>(st.step_count) / per);
    w[k].y.push_back(st.class_weights[k]);
  }
  svg::write({"Task balance alpha", "epoch", "alpha", {a}}, (dir / "alpha.svg").string());
  svg::write({"Answer class weights", "epoch", "weight", w}, (dir / "weights.svg").string());

  svg::Series miou{"val mIoU", {}, {}}, acc{"val accuracy", {}, {}}, al{"alpha", {}, {}};
  svg::Series ts{"train l_seg", {}, {}}, tv{"train l_vqa", {}, {}}, tt{"train l_total", {}, {}};
  svg::Series vs{"val l_seg", {}, {}}, vv{"val l_vqa", {}, {}}, vt{"val l_total", {}, {}};
  for (const auto& r : log.rows) {
    const double e = static_cast<double>(r.epoch);
    auto put = [e](svg::Series& s, double v) {
      s.x.push_back(e);
      s.y.push_back(v);
    };
    put(miou, r.val.miou);
    put(acc, r.val.accuracy.overall());
    put(al, r.alpha);
    put(ts, r.train.l_seg);
    put(tv, r.train.l_vqa);
    put(tt, r.train.l_total);
    put(vs, r.val.l_seg);
    put(vv, r.val.l_vqa);
    put(vt, r.val.l_total);
  }
  svg::write({"Validation metrics and alpha", "epoch", "value", {miou, acc, al}}, (dir / "metrics.svg").string());
  svg::write({"Losses", "epoch", "loss", {ts, tv, tt, vs, vv, vt}}, (dir / "losses.svg").string());
}

}  // namespace detail

inline json run_metadata(const RunResult& r, const RunData& rd, std::size_t epochs_completed,
                         const std::string& status) {
  auto count = [](const data::Dataset& d) {
    return json{{"images", d.samples.size()}, {"questions", d.qa_count()}};
  };
  return {{"revision", DATWEP_REVISION},
          {"status", status},
          {"epochs_completed", epochs_completed},
          {"config", to_json(r.config)},
          {"parameter_count", r.params.count()},
          {"image_feature_width", r.config.model.image_feature_width()},
          {"answers", rd.answers},
          {"class_names", rd.class_names},
          {"splits", {{"train", count(rd.splits.train)}, {"val", count(rd.splits.val)}, {"test", count(rd.splits.test)}}},
          {"batches_per_epoch", r.batches_per_epoch},
          {"scheduler_steps", r.scheduler.step_count},
          {"final_alpha", r.scheduler.alpha},
          {"final_class_weights", r.scheduler.class_weights},
          {"data_warnings", rd.warnings}};
}

/// Writes metrics.csv, scheduler_history.csv, plots/ and run_metadata.json.
inline void write_outputs(const fs::path& out, const RunResult& r, const RunData& rd, std::size_t epochs_completed,
                          const std::string& status) {
  fs::create_directories(out);
  {
    std::ofstream os(out / "metrics.csv", std::ios::binary | std::ios::trunc);
    r.log.write_csv(os);
  }
  {
    std::ofstream os(out / "scheduler_history.csv", std::ios::binary | std::ios::trunc);
    curriculum::write_history_csv(os, r.scheduler);
  }
  detail::write_plots(out / "plots", r.log, r.scheduler, r.batches_per_epoch, rd.answers);
  detail::write_text(out / "run_metadata.json", run_metadata(r, rd, epochs_completed, status).dump(2) + "\n");
}

/// Training loop. Per batch: forward both heads, total loss with the current alpha and
/// class weights, backward, AdamW step, then the scheduler update from that batch's losses.
/// A checkpoint is written after initialisation and after every epoch; on a non-finite
/// loss the run stops, outputs are written, the last checkpoint is kept and NumericError is thrown.
inline RunResult train(RunConfig cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunData rd = load_run_data(cfg);
  cfg.model = resolve_model(cfg.model, rd);
  const auto& mcfg = cfg.model;
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);

  RunResult r;
  r.config = cfg;
  r.answers = rd.answers;
  r.log.class_names = rd.class_names;
  r.params = model::init_params(mcfg, cfg.seed);
  r.scheduler = curriculum::SchedulerState::initial(mcfg.n_answer_classes);
  optim::AdamW opt(r.params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.grad_clip_norm});
  const auto schedule = cfg.schedule();
  const auto vocab = text::Vocabulary::standard();
  const bool per_batch = cfg.scheduler.cadence == curriculum::UpdateCadence::PerBatch;
  const fs::path ck_path = out / "checkpoint.bin";

  std::vector<const data::Sample*> order;
  for (const auto& s : rd.splits.train.samples) order.push_back(&s);
  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  r.batches_per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
  checkpoint::save(detail::make_checkpoint(cfg, 0, r.params, r.scheduler, opt, rd), ck_path);

  if (log) {
    *log << "train " << rd.splits.train.samples.size() << " images / " << rd.splits.train.qa_count()
         << " questions, val " << rd.splits.val.samples.size() << " / " << rd.splits.val.qa_count() << ", "
         << r.params.count() << " parameters\n";
  }

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    opt.set_lr(schedule.at(epoch));
    shuffle_rng.shuffle(order);
    SplitAccumulator train_acc(mcfg.n_seg_classes);
    curriculum::EpochAccumulator epoch_acc;
    for (const auto& group : batches(order, cfg.batch_size)) {
      const Batch b = make_batch(group, vocab, mcfg.l_max);
      Tape tape;
      model::BoundParams bp(tape, r.params);
      const Forward f = forward(tape, b, bp, r.params, mcfg, r.scheduler.alpha, r.scheduler.class_weights,
                                cfg.scheduler.alpha_convention, model::Mode::Train);
      const auto& bd = f.vqa.breakdown;
      if (!std::isfinite(bd.l_total) || !std::isfinite(bd.l_seg) || !std::isfinite(bd.l_vqa)) {
        write_outputs(out, r, rd, epoch - 1, "aborted: non-finite loss");
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(r.total_batches) + "; last good checkpoint is from epoch " +
                           std::to_string(epoch - 1));
      }
      tape.backward(f.total);
      std::vector<Tensor> grads;
      grads.reserve(bp.vars().size());
      for (const Var& v : bp.vars()) grads.push_back(v.grad());
      opt.step(r.params, grads);
      if (!r.params.all_finite()) {
        write_outputs(out, r, rd, epoch - 1, "aborted: non-finite parameters");
        throw NumericError("non-finite parameters after epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(r.total_batches));
      }
      if (per_batch) {
        curriculum::datwep_step(r.scheduler, bd, cfg.scheduler);
      } else {
        epoch_acc.add(bd);
      }
      train_acc.add_batch_seg(bd.l_seg);
      train_acc.add(f, b);
      ++r.total_batches;
    }
    if (!per_batch) curriculum::datwep_step(r.scheduler, epoch_acc.merged(), cfg.scheduler);

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = opt.lr();
    em.alpha = r.scheduler.alpha;
    em.weights = r.scheduler.class_weights;
    em.train = train_acc.result(true, r.scheduler.alpha, r.scheduler.class_weights, cfg.scheduler.alpha_convention);
    em.val = evaluate(r.params, mcfg, rd.splits.val.samples, r.scheduler.alpha, r.scheduler.class_weights,
                      cfg.scheduler.alpha_convention, cfg.batch_size);
    r.log.rows.push_back(em);
    checkpoint::save(detail::make_checkpoint(cfg, epoch, r.params, r.scheduler, opt, rd), ck_path);
    if (log) {
      char line[200];
      std::snprintf(line, sizeof line,
                    "epoch %2zu  lr %.3g  alpha %.5f  train total %.4f seg %.4f vqa %.4f  val mIoU %.4f acc %.4f\n",
                    epoch, em.lr, em.alpha, em.train.l_total, em.train.l_seg, em.train.l_vqa, em.val.miou,
                    em.val.accuracy.overall());
      *log << line << std::flush;
    }
  }
  write_outputs(out, r, rd, cfg.epochs, "completed");
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation.

enum class SplitName { Train, Val, Test, All };

inline SplitName parse_split_name(std::string_view s) {
  if (s == "train") return SplitName::Train;
  if (s == "val") return SplitName::Val;
  if (s == "test") return SplitName::Test;
  if (s == "all") return SplitName::All;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

struct EvalReport {
  SplitMetrics metrics;
  std::vector<std::string> class_names;
  std::size_t epoch = 0;
};

/// Evaluates a checkpoint on its own run's data, or on the directory `data_override` if given.
inline EvalReport evaluate_checkpoint(const checkpoint::Checkpoint& ck, SplitName which,
                                      const std::optional<std::string>& data_override = std::nullopt) {
  RunConfig cfg = run_config_from_json(ck.run);
  if (data_override) {
    cfg.data.kind = DataKind::Directory;
    cfg.data.directory = *data_override;
  }
  cfg.model = ck.model_config;
  const RunData rd = load_run_data(cfg);
  if (rd.answers != ck.answers) throw ValidationError("dataset answer table differs from the checkpoint's");
  if (rd.class_names.size() != ck.model_config.n_seg_classes) {
    throw ValidationError("dataset has a different number of segmentation classes than the checkpoint");
  }
  std::vector<data::Sample> samples;
  auto take = [&](const data::Dataset& d) { samples.insert(samples.end(), d.samples.begin(), d.samples.end()); };
  switch (which) {
    case SplitName::Train: take(rd.splits.train); break;
    case SplitName::Val: take(rd.splits.val); break;
    case SplitName::Test: take(rd.splits.test); break;
    case SplitName::All:
      take(rd.splits.train);
      take(rd.splits.val);
      take(rd.splits.test);
      break;
  }
  EvalReport rep;
  rep.class_names = ck.class_names;
  rep.epoch = ck.epoch;
  rep.metrics = evaluate(ck.params, ck.model_config, samples, ck.alpha, ck.class_weights,
                         cfg.scheduler.alpha_convention, cfg.batch_size);
  return rep;
}

}  // namespace datwep::trainer
