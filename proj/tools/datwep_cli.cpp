#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "datwep/checkpoint.hpp"
#include "datwep/gradcheck.hpp"
#include "datwep/trainer.hpp"

using namespace datwep;

namespace {

int report(const std::vector<gradcheck::CheckResult>& results) {
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-26s %s  checked %4zu  skipped %3zu  max rel err %.3e  (tol %.0e)\n", r.name.c_str(),
                r.passed() ? "PASS" : "FAIL", r.checked, r.skipped, r.max_rel_err, r.tolerance);
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

int run_gradcheck(const std::string& scope, std::uint64_t seed) {
  if (scope == "layers") return report(gradcheck::layer_suite(seed));
  if (scope == "datap") {
    const double g = curriculum::datap_reg_grad(0.5);
    std::printf("regularizer gradient at alpha=0.5: %.6f\n", g);
    int rc = 0;
    for (auto v : {curriculum::SigmoidVariant::Standard, curriculum::SigmoidVariant::Negated})
      for (auto c : {losses::AlphaConvention::VqaWeighted, losses::AlphaConvention::SegWeighted}) {
        curriculum::SchedulerConfig cfg;
        cfg.sigmoid_variant = v;
        cfg.alpha_convention = c;
        auto r = gradcheck::datap_suite(seed, 100, 1e-6, cfg);
        r.name = "datap " + std::string(curriculum::sigmoid_variant_name(v)) + " " +
                 std::string(losses::alpha_convention_name(c));
        rc |= report({r});
      }
    return rc;
  }
  if (scope == "dawep") {
    const auto g = curriculum::dawep_grads(gradcheck::dawep_reference_breakdown());
    std::printf("three-sample case gradients: %.14f %+.14f\n", g[0], g[1]);
    std::printf("printed reference 0.241007: |diff| = %.3e\n", std::abs(std::abs(g[0]) - 0.241007));
    return report({gradcheck::dawep_suite(seed)});
  }
  if (scope == "end2end") return report({gradcheck::end_to_end(seed)});
  std::cerr << "unknown gradcheck scope '" << scope << "' (layers | datap | dawep | end2end)\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multitask segmentation and VQA trainer with dynamic task and class weighting"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("datwep ") + DATWEP_REVISION);

  // train
  trainer::RunConfig rc;
  std::string data_arg = "synthetic", alpha_conv = "vqa-weighted", sigmoid = "standard", cadence = "per-batch",
              norm = "batch";
  auto* train = app.add_subcommand("train", "train on synthetic data or a dataset directory");
  train->set_config("--config", "", "config file of key = value lines (option names without dashes)");
  train->add_option("--data", data_arg, "'synthetic' or a dataset directory")->capture_default_str();
  train->add_option("--epochs", rc.epochs)->capture_default_str();
  train->add_option("--seed", rc.seed, "model initialisation and shuffling seed")->capture_default_str();
  train->add_option("--batch-size", rc.batch_size, "images per batch")->capture_default_str();
  train->add_option("--lr", rc.lr, "base learning rate")->capture_default_str();
  train->add_option("--lr-factor", rc.lr_factor, "learning-rate multiplier per interval")->capture_default_str();
  train->add_option("--lr-interval", rc.lr_interval, "epochs per learning-rate step")->capture_default_str();
  train->add_option("--weight-decay", rc.weight_decay)->capture_default_str();
  train->add_option("--grad-clip-norm", rc.grad_clip_norm, "global gradient norm limit, 0 for none")
      ->capture_default_str();
  train->add_option("--alpha-convention", alpha_conv, "vqa-weighted | seg-weighted")->capture_default_str();
  train->add_option("--sigmoid-variant", sigmoid, "standard | negated")->capture_default_str();
  train->add_option("--cadence", cadence, "per-batch | per-epoch-mean")->capture_default_str();
  train->add_option("--eps-datap", rc.scheduler.eps_datap)->capture_default_str();
  train->add_option("--eps-dawep", rc.scheduler.eps_dawep)->capture_default_str();
  train->add_option("--lambda-reg", rc.scheduler.lambda_reg)->capture_default_str();
  train->add_option("--image-size", rc.model.image_size)->capture_default_str();
  train->add_option("--base-channels", rc.model.base_channels)->capture_default_str();
  train->add_option("--seg-classes", rc.model.n_seg_classes, "mask channels for directory data")
      ->capture_default_str();
  train->add_option("--text-hidden", rc.model.text_hidden)->capture_default_str();
  train->add_option("--fusion-hidden", rc.model.fusion_hidden, "0 disables the fusion layer")->capture_default_str();
  train->add_option("--d-emb", rc.model.d_emb)->capture_default_str();
  train->add_option("--l-max", rc.model.l_max)->capture_default_str();
  train->add_option("--norm", norm, "batch | affine")->capture_default_str();
  train->add_option("--n", rc.data.n_images, "synthetic images")->capture_default_str();
  train->add_option("--data-seed", rc.data.seed, "synthetic generation seed")->capture_default_str();
  train->add_option("--split-seed", rc.data.split.seed)->capture_default_str();
  train->add_option("--out", rc.out_dir, "output directory")->capture_default_str();

  // eval
  std::string ck_path, split_name = "val";
  std::optional<std::string> eval_data;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", ck_path, "checkpoint file")->required();
  eval->add_option("--split", split_name, "train | val | test | all")->capture_default_str();
  eval->add_option("--data", eval_data, "dataset directory instead of the run's own data");

  // gradcheck
  std::string scope;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("scope", scope, "layers | datap | dawep | end2end")->required();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  // synth
  std::size_t synth_n = 64;
  std::uint64_t synth_seed = 7;
  std::string synth_out = "synthetic";
  data::SynthConfig sc;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory");
  synth->add_option("--n", synth_n, "images")->capture_default_str();
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--image-size", sc.image_size)->capture_default_str();
  synth->add_option("--max-buildings", sc.max_buildings)->capture_default_str();
  synth->add_option("--noise", sc.noise)->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();

  // tokenize
  std::vector<std::string> questions;
  std::size_t tok_lmax = text::kDefaultMaxLength;
  auto* tok = app.add_subcommand("tokenize", "show the token ids of questions");
  tok->add_option("question", questions)->required();
  tok->add_option("--l-max", tok_lmax)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      if (data_arg != "synthetic") {
        rc.data.kind = trainer::DataKind::Directory;
        rc.data.directory = data_arg;
      }
      rc.scheduler.alpha_convention = losses::parse_alpha_convention(alpha_conv);
      rc.scheduler.sigmoid_variant = curriculum::parse_sigmoid_variant(sigmoid);
      rc.scheduler.cadence = curriculum::parse_cadence(cadence);
      rc.model.norm = model::parse_norm_mode(norm);
      const auto r = trainer::train(rc, &std::cout);
      const auto& last = r.log.rows.back();
      trainer::print_split(std::cout, "final validation (epoch " + std::to_string(last.epoch) + ")", last.val,
                           r.log.class_names);
      std::cout << "outputs written to " << rc.out_dir << "\n";
      return 0;
    }
    if (*eval) {
      const auto ck = checkpoint::load(ck_path);
      const auto rep = trainer::evaluate_checkpoint(ck, trainer::parse_split_name(split_name), eval_data);
      trainer::print_split(std::cout, split_name + " split, checkpoint epoch " + std::to_string(rep.epoch),
                           rep.metrics, rep.class_names);
      return 0;
    }
    if (*gc) return run_gradcheck(scope, gc_seed);
    if (*synth) {
      const auto ds = data::generate_synthetic(synth_n, sc, synth_seed);
      data::write_dataset_dir(ds, synth_out);
      std::cout << "wrote " << ds.samples.size() << " images, " << ds.qa_count() << " questions, "
                << ds.answers.size() << " answers to " << synth_out << "\n";
      return 0;
    }
    if (*tok) {
      const auto vocab = text::Vocabulary::standard();
      for (const auto& q : questions) {
        const auto seq = text::tokenize(q, vocab, tok_lmax);
        std::cout << text::normalize_question(q) << "\n  length " << seq.true_length << " of " << tok_lmax << "\n ";
        for (std::size_t i = 0; i < seq.true_length; ++i) std::cout << ' ' << seq.ids[i];
        std::cout << "\n ";
        for (std::size_t i = 0; i < seq.true_length; ++i) std::cout << ' ' << text::token_name(seq.ids[i], vocab);
        std::cout << "\n";
      }
      return 0;
    }
  } catch (const NumericError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
