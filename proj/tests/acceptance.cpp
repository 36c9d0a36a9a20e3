// Acceptance binary: one PASS/FAIL line per criterion; exit status 1 if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "datwep/checkpoint.hpp"
#include "datwep/gradcheck.hpp"
#include "datwep/trainer.hpp"

using namespace datwep;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and thresholds.
constexpr double kPrimitiveTol = 1e-5;
constexpr double kSchedulerTol = 1e-6;
constexpr std::size_t kMinCases = 100;
constexpr double kOracleSuiteSeconds = 120.0;
constexpr double kDawepReference = 0.241007;
constexpr double kDawepTol = 1e-6;
constexpr double kRestoreStart[2] = {1.5, -0.5};
constexpr std::size_t kRestoreSteps = 500;
constexpr double kDeltaSlack = 1e-12;  // relative, for the subtraction that measures a weight step
constexpr double kRunSeconds = 900.0;
constexpr double kLossRatio = 0.5;
constexpr double kMinMiou = 0.6;
constexpr double kMinAccuracy = 0.8;
constexpr double kAlphaStableDelta = 0.01;
constexpr std::size_t kStableEpochs = 5;
constexpr double kAlphaEnvelope[2] = {0.05, 0.95};

int failures = 0;

void line(int id, bool pass, const std::string& detail) {
  std::printf("CRITERION %d %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char b[512];
  std::snprintf(b, sizeof b, f, args...);
  return b;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<gradcheck::CheckResult> all = gradcheck::layer_suite(1, kMinCases, kPrimitiveTol);
  all.push_back(gradcheck::end_to_end(4, kMinCases + 20, kPrimitiveTol));
  for (auto v : {curriculum::SigmoidVariant::Standard, curriculum::SigmoidVariant::Negated})
    for (auto c : {losses::AlphaConvention::VqaWeighted, losses::AlphaConvention::SegWeighted}) {
      curriculum::SchedulerConfig cfg;
      cfg.sigmoid_variant = v;
      cfg.alpha_convention = c;
      auto r = gradcheck::datap_suite(2, kMinCases, kSchedulerTol, cfg);
      r.name += std::string(" ") + std::string(curriculum::sigmoid_variant_name(v)) + "/" +
                std::string(losses::alpha_convention_name(c));
      all.push_back(r);
    }
  all.push_back(gradcheck::dawep_suite(3, kMinCases, kSchedulerTol));
  const double secs = seconds_since(t0);

  bool ok = secs < kOracleSuiteSeconds;
  double worst_prim = 0.0, worst_sched = 0.0;
  std::string failed;
  for (const auto& r : all) {
    const bool sched = r.tolerance == kSchedulerTol;
    (sched ? worst_sched : worst_prim) = std::max(sched ? worst_sched : worst_prim, r.max_rel_err);
    const bool enough = r.name == "end_to_end" ? r.checked >= kMinCases : r.cases >= kMinCases;
    if (!r.passed() || !enough) {
      ok = false;
      failed += " " + r.name;
    }
    std::printf("  %-38s checked %5zu skipped %4zu max rel err %.3e tol %.0e\n", r.name.c_str(), r.checked, r.skipped,
                r.max_rel_err, r.tolerance);
  }
  line(1, ok,
       fmt("%zu checks; max rel err %.3e (primitives/end-to-end, tol %.0e), %.3e (scheduler, tol %.0e); %.1f s "
           "(limit %.0f s)%s%s",
           all.size(), worst_prim, kPrimitiveTol, worst_sched, kSchedulerTol, secs, kOracleSuiteSeconds,
           failed.empty() ? "" : "; failed:", failed.c_str()));
}

void criterion_dawep_example() {
  const auto g = curriculum::dawep_grads(gradcheck::dawep_reference_breakdown());
  const double d0 = std::abs(g[0] + kDawepReference), d1 = std::abs(g[1] - kDawepReference);
  line(2, d0 < kDawepTol && d1 < kDawepTol,
       fmt("grads (%.14f, %+.14f) vs (-%.6f, +%.6f): |diff| %.3e, %.3e (tol %.0e)", g[0], g[1], kDawepReference,
           kDawepReference, d0, d1, kDawepTol));
}

void criterion_restoring_force() {
  curriculum::SchedulerConfig cfg;
  bool ok = true;
  std::string detail;
  for (double start : kRestoreStart) {
    auto st = curriculum::SchedulerState::initial(2);
    st.alpha = start;
    bool monotone = true;
    for (std::size_t i = 0; i < kRestoreSteps; ++i) {
      const double before = st.alpha;
      const double after = curriculum::datap_step(st, 0.7, 0.7, cfg);
      if (before > 1.0) monotone = monotone && after < before;
      else if (before < 0.0) monotone = monotone && after > before;
      else monotone = monotone && after >= 0.0 && after <= 1.0;
    }
    const bool end_ok = start > 1.0 ? st.alpha < 1.0 : st.alpha > 0.0;
    ok = ok && monotone && end_ok;
    detail += fmt("%s%.2f -> %.6f after %zu steps (%s)", detail.empty() ? "" : "; ", start, st.alpha, kRestoreSteps,
                  monotone ? "monotone toward [0,1]" : "NOT monotone");
  }
  line(3, ok, detail);
}

void criterion_dataset_roundtrips(const trainer::RunConfig& cfg, bool& ok, std::string& detail) {
  auto sc = cfg.data.synth;
  sc.image_size = cfg.model.image_size;
  const auto ds = data::generate_synthetic(cfg.data.n_images, sc, cfg.data.seed);
  const fs::path dir = fs::path(cfg.out_dir).parent_path() / "acceptance_dataset";
  fs::remove_all(dir);
  data::write_dataset_dir(ds, dir);
  const auto back = data::load_dataset_dir(dir, {cfg.model.image_size, ds.n_seg_classes});
  const bool ds_ok = back.samples == ds.samples && back.answers == ds.answers && back.warnings.empty();
  fs::remove_all(dir);

  const auto vocab = text::Vocabulary::standard();
  std::size_t questions = 0, round = 0;
  for (const auto& s : ds.samples)
    for (const auto& q : s.qa) {
      ++questions;
      const auto seq = text::tokenize(q.question, vocab, cfg.model.l_max);
      round += text::detokenize(seq, vocab) == text::normalize_question(q.question);
    }
  ok = ok && ds_ok && round == questions;
  detail += fmt("; dataset write->load %s (%zu images); tokenizer round-trip %zu/%zu", ds_ok ? "exact" : "DIFFERS",
                ds.samples.size(), round, questions);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "datwep_acceptance";
  fs::create_directories(work);

  criterion_gradients();
  criterion_dawep_example();
  criterion_restoring_force();

  trainer::RunConfig cfg;  // the CLI defaults
  cfg.out_dir = (work / "run").string();
  fs::remove_all(cfg.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = trainer::train(cfg);
  const double run_secs = seconds_since(t0);
  const auto& h = r.scheduler.history;
  const auto& rows = r.log.rows;

  {
    bool ok = !h.empty() && h[0].alpha == 0.5;
    for (double w : h.front().weights) ok = ok && w == 1.0;
    double max_delta = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      const auto& next = i + 1 < h.size() ? h[i + 1].weights : r.scheduler.class_weights;
      for (std::size_t k = 0; k < next.size(); ++k) max_delta = std::max(max_delta, std::abs(next[k] - h[i].weights[k]));
    }
    const double limit = cfg.scheduler.eps_dawep * 1.5;
    ok = ok && max_delta <= limit * (1.0 + kDeltaSlack) && h.size() == r.total_batches;
    line(4, ok,
         fmt("first row alpha %.17g, unit weights %s; max weight step %.6e (limit %.6e); history rows %zu, "
             "batches %zu",
             h.front().alpha, ok ? "yes" : "check", max_delta, limit, h.size(), r.total_batches));
  }

  {
    const double ratio = rows.back().train.l_total / rows.front().train.l_total;
    const auto& v = rows.back().val;
    const bool ok = run_secs < kRunSeconds && ratio < kLossRatio && v.miou >= kMinMiou &&
                    v.accuracy.overall() >= kMinAccuracy;
    line(5, ok,
         fmt("%zu images, %zu epochs in %.0f s (limit %.0f); loss epoch %zu/epoch 1 = %.4f/%.4f = %.3f (< %.2f); "
             "val mIoU %.4f (>= %.2f); val accuracy %.4f (>= %.2f)",
             cfg.data.n_images, rows.size(), run_secs, kRunSeconds, rows.size(), rows.back().train.l_total,
             rows.front().train.l_total, ratio, kLossRatio, v.miou, kMinMiou, v.accuracy.overall(), kMinAccuracy));
    std::printf("  val accuracy by type:");
    for (auto t : kAllQuestionTypes) {
      const auto a = v.accuracy.for_type(t);
      std::printf(" %s %.4f;", std::string(question_type_label(t)).c_str(), a ? *a : NAN);
    }
    std::printf("\n");
  }

  {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& rec : h) lo = std::min(lo, rec.alpha), hi = std::max(hi, rec.alpha);
    lo = std::min(lo, r.scheduler.alpha);
    hi = std::max(hi, r.scheduler.alpha);
    double max_tail = 0.0;
    for (std::size_t e = rows.size() - kStableEpochs; e < rows.size(); ++e) {
      max_tail = std::max(max_tail, std::abs(rows[e].alpha - rows[e - 1].alpha));
    }
    const bool ok = hi > lo && max_tail < kAlphaStableDelta;
    line(6, ok,
         fmt("alpha range [%.5f, %.5f]; max |delta alpha| per epoch over the last %zu epochs %.5f (< %.2f); final "
             "alpha %.5f",
             lo, hi, kStableEpochs, max_tail, kAlphaStableDelta, r.scheduler.alpha));
    std::printf("  alpha envelope [%.2f, %.2f]: %s\n", kAlphaEnvelope[0], kAlphaEnvelope[1],
                lo >= kAlphaEnvelope[0] && hi <= kAlphaEnvelope[1] ? "inside" : "OUTSIDE");
  }

  {
    bool ok = true;
    std::string detail;
    trainer::RunConfig again = cfg;
    again.out_dir = (work / "run_again").string();
    fs::remove_all(again.out_dir);
    trainer::train(again);
    const bool same_metrics = slurp(fs::path(cfg.out_dir) / "metrics.csv") == slurp(fs::path(again.out_dir) / "metrics.csv");
    const bool same_hist = slurp(fs::path(cfg.out_dir) / "scheduler_history.csv") ==
                           slurp(fs::path(again.out_dir) / "scheduler_history.csv");
    ok = same_metrics && same_hist;
    detail += fmt("repeat run: metrics.csv %s, scheduler_history.csv %s", same_metrics ? "identical" : "DIFFERS",
                  same_hist ? "identical" : "DIFFERS");

    const auto ck = checkpoint::load(fs::path(cfg.out_dir) / "checkpoint.bin");
    const bool params_same = ck.params == r.params && ck.alpha == r.scheduler.alpha &&
                             ck.class_weights == r.scheduler.class_weights;
    const auto rep = trainer::evaluate_checkpoint(ck, trainer::SplitName::Val);
    const auto& want = rows.back().val;
    const bool metrics_same = rep.metrics.l_seg == want.l_seg && rep.metrics.l_vqa == want.l_vqa &&
                              rep.metrics.l_total == want.l_total && rep.metrics.miou == want.miou &&
                              rep.metrics.miou_per_class == want.miou_per_class &&
                              rep.metrics.accuracy.correct == want.accuracy.correct &&
                              rep.metrics.accuracy.type_correct == want.accuracy.type_correct;
    ok = ok && params_same && metrics_same;
    detail += fmt("; checkpoint save->load %s, re-evaluation %s", params_same ? "exact" : "DIFFERS",
                  metrics_same ? "bit-identical" : "DIFFERS");
    criterion_dataset_roundtrips(cfg, ok, detail);
    line(7, ok, detail);
  }

  std::printf("ACCEPTANCE %d/7 criteria passed\n", 7 - failures);
  return failures == 0 ? 0 : 1;
}
