#include <CLI11.hpp>

#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "pcpr/data.hpp"
#include "pcpr/encoder.hpp"
#include "pcpr/errors.hpp"
#include "pcpr/eval.hpp"
#include "pcpr/experiment.hpp"
#include "pcpr/selfcheck.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitSelfcheck = 1;
constexpr int kExitConfig = 2;
constexpr int kExitTrain = 3;
constexpr int kExitEval = 4;

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir) {
  using namespace pcpr;
  try {
    const ExperimentConfig cfg = load_experiment(spec_path);
    std::vector<DomainSource> sources = cfg.domains;
    if (cfg.holdout) sources.push_back(*cfg.holdout);
    const std::filesystem::path out(out_dir);
    for (std::size_t i = 0; i < sources.size(); ++i) {
      const DomainSource& src = sources[i];
      DomainDataset ds;
      if (src.synthetic) {
        ds = generate_domain(*src.synthetic, src.name, src.thresholds, static_cast<int>(i));
        save_dataset(ds, out / src.name);
      } else {
        ds = load_dataset(src.manifest, static_cast<int>(i));
      }
      std::cout << src.name << ": train " << ds.train.size() << ", database "
                << ds.test_database.size() << ", queries " << ds.test_queries.size()
                << (src.synthetic ? "" : " (external, not regenerated)") << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_flag, int resume_from) {
  using namespace pcpr;
  ExperimentConfig cfg;
  std::filesystem::path out;
  try {
    cfg = load_experiment(config_path);
    out = out_flag.empty() ? std::filesystem::path(cfg.out) : std::filesystem::path(out_flag);
    if (out.empty()) {
      throw InvalidSpec("train: no output directory ('out' in the config or --out)");
    }
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    const ExperimentResult res = run_experiment(cfg, out, resume_from);
    std::printf("mR@1: %.2f\n", res.report.mean_recall_1);
    if (res.report.forgetting) {
      std::printf("F: %.2f\n", *res.report.forgetting);
    } else {
      std::printf("F: n/a (every domain evaluated once)\n");
    }
    if (res.report.zero_shot) std::printf("zero-shot R@1: %.2f\n", *res.report.zero_shot);
    std::cout << "artifacts: " << (out / "recall_matrix.csv").string() << ", "
              << (out / "report.json").string() << ", " << (out / "checkpoints").string()
              << "\n";
  } catch (const std::exception& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kExitTrain;
  }
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::vector<std::string>& manifests,
             bool zero_shot_mode, std::vector<int> recall_ns, const std::string& out_path) {
  using namespace pcpr;
  if (recall_ns.empty()) recall_ns = {1, 5, 10, 25};
  for (int n : recall_ns) {
    if (n < 1) {
      std::cerr << "config error: --recall-n entries must be >= 1\n";
      return kExitConfig;
    }
  }
  try {
    const EncoderParams params = load_params(checkpoint);
    EvalReport report;
    std::vector<DomainDataset> domains;
    for (std::size_t i = 0; i < manifests.size(); ++i) {
      domains.push_back(load_dataset(manifests[i], static_cast<int>(i), &report.warnings));
    }
    std::vector<const DomainDataset*> ptrs;
    for (const DomainDataset& d : domains) ptrs.push_back(&d);

    double sum = 0.0;
    for (const DomainDataset& d : domains) {
      const double r1 = evaluate_domain(params, d, 1);
      report.domain_names.push_back(d.name);
      report.final_recall_per_domain.push_back(r1);
      sum += r1;
    }
    report.mean_recall_1 = sum / static_cast<double>(domains.size());
    report.recall_curve = mean_recall_curve(params, ptrs, recall_ns);
    if (zero_shot_mode) report.zero_shot = report.mean_recall_1;

    std::printf("mR@1: %.2f\n", report.mean_recall_1);
    for (const auto& [n, v] : report.recall_curve) std::printf("R@%d: %.2f\n", n, v);
    if (report.zero_shot) std::printf("zero-shot R@1: %.2f\n", *report.zero_shot);
    for (const std::string& w : report.warnings) std::cout << "warning: " << w << "\n";
    if (!out_path.empty()) {
      save_report(report, out_path);
      std::cout << "report: " << out_path << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "eval error: " << e.what() << "\n";
    return kExitEval;
  }
  return kExitOk;
}

int cmd_selfcheck(bool flip_sa_sign) {
  pcpr::SelfcheckOptions opts;
  opts.flip_sa_gradient_sign = flip_sa_sign;
  std::vector<pcpr::CheckResult> results;
  try {
    results = pcpr::run_selfcheck(opts);
  } catch (const std::exception& e) {
    std::cerr << "selfcheck crashed: " << e.what() << "\n";
    return kExitSelfcheck;
  }
  std::vector<std::string> failed;
  for (const pcpr::CheckResult& r : results) {
    std::printf("[%s] %-30s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str());
    if (!r.pass) failed.push_back(r.name);
  }
  if (!failed.empty()) {
    std::cout << "failed checks:";
    for (const std::string& n : failed) std::cout << ' ' << n;
    std::cout << "\n";
    return kExitSelfcheck;
  }
  std::cout << "all " << results.size() << " checks passed\n";
  return kExitOk;
}

/// PCPR_THREADS caps the worker count of the one pool in play (Eigen's).
/// Unset means library default; anything else must be a positive integer.
int apply_thread_cap() {
  const char* env = std::getenv("PCPR_THREADS");
  if (env == nullptr) return kExitOk;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) {
    std::cerr << "config error: PCPR_THREADS must be a positive integer, got '" << env
              << "'\n";
    return kExitConfig;
  }
  Eigen::setNbThreads(static_cast<int>(n));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  if (const int rc = apply_thread_cap(); rc != kExitOk) return rc;
  CLI::App app{
      "pcpr: incremental metric learning for point-cloud place recognition.\n"
      "Exit codes: 0 ok, 1 selfcheck failure, 2 bad config, 3 training failure, "
      "4 evaluation failure."};
  app.require_subcommand(1);

  std::string gen_spec, gen_out;
  CLI::App* gen =
      app.add_subcommand("gen-data", "Generate the synthetic domain datasets of a config");
  gen->add_option("--spec", gen_spec, "Experiment config with the domain specs (JSON)")
      ->required();
  gen->add_option("--out", gen_out, "Directory for the generated datasets")->required();

  std::string train_config, train_out;
  int resume_from = 0;
  CLI::App* train = app.add_subcommand("train", "Run an incremental training protocol");
  train->add_option("--config", train_config, "Experiment config (JSON)")->required();
  train->add_option("--out", train_out, "Output directory (overrides the config's 'out')");
  train
      ->add_option("--resume-from", resume_from,
                   "Resume after this many completed steps, from their checkpoint")
      ->check(CLI::NonNegativeNumber);

  std::string eval_checkpoint, eval_out;
  std::vector<std::string> eval_manifests;
  std::vector<int> eval_ns;
  bool eval_zero_shot = false;
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on dataset manifests");
  ev->add_option("--checkpoint", eval_checkpoint, "Encoder parameter file (.pcprw)")
      ->required();
  ev->add_option("--manifest", eval_manifests,
                 "Dataset manifest path (repeatable, in protocol order)")
      ->required();
  ev->add_flag("--zero-shot", eval_zero_shot,
               "Report the result as zero-shot recall on never-trained domains");
  ev->add_option("--recall-n", eval_ns, "Recall@N cutoffs, comma separated (default 1,5,10,25)")
      ->delimiter(',');
  ev->add_option("--out", eval_out, "Write the report JSON here");

  bool flip_sa_sign = false;
  CLI::App* self = app.add_subcommand(
      "selfcheck", "Run the gradient, invariance, metric-oracle and memory checks");
  self->add_flag("--inject-sa-sign-flip", flip_sa_sign,
                 "Fault injection: negate one analytic gradient to prove the harness fails")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (gen->parsed()) return cmd_gen_data(gen_spec, gen_out);
  if (train->parsed()) return cmd_train(train_config, train_out, resume_from);
  if (ev->parsed()) {
    return cmd_eval(eval_checkpoint, eval_manifests, eval_zero_shot, eval_ns, eval_out);
  }
  if (self->parsed()) return cmd_selfcheck(flip_sa_sign);
  return kExitConfig;
}
