#include <doctest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "pcpr/encoder.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Run the installed binary through the shell; env_prefix lets tests set
/// variables for a single invocation ("PCPR_THREADS=2 ").
CliRun run_cli(const std::string& args, const std::string& env_prefix = "") {
  static int counter = 0;
  const fs::path dir = fs::temp_directory_path() / ("pcpr-cli-" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const fs::path out = dir / ("out" + std::to_string(counter));
  const fs::path err = dir / ("err" + std::to_string(counter));
  ++counter;
  const std::string cmd = env_prefix + "\"" + PCPR_CLI_PATH + "\" " + args + " > \"" +
                          out.string() + "\" 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

json tiny_synthetic(std::uint64_t seed) {
  return json{{"seed", seed},           {"num_places", 6},       {"area_side", 600.0},
              {"landmarks_per_place", 3}, {"landmark_scale", 1.0}, {"noise_sigma", 0.02},
              {"revisit_count", 2},     {"points_per_cloud", 12}};
}

json tiny_config(int n_domains, const std::string& method) {
  json domains = json::array();
  const char* names[] = {"alpha", "beta", "gamma", "delta"};
  for (int i = 0; i < n_domains; ++i) {
    domains.push_back({{"name", names[i]}, {"synthetic", tiny_synthetic(81 + i)}});
  }
  return json{{"seed", 13},
              {"method", method},
              {"epochs", 2},
              {"batch_anchors", 4},
              {"memory_K", 8},
              {"encoder", {{"hidden_dims", {4}}, {"descriptor_dim", 3}}},
              {"recall_ns", {1, 5}},
              {"domains", domains},
              {"holdout", nullptr}};
}

fs::path scratch(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() /
                       ("pcpr-clis-" + tag + "-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const json& doc) {
  const fs::path p = dir / "config.json";
  std::ofstream os(p);
  os << doc.dump(2);
  return p;
}

}  // namespace

TEST_CASE("usage errors and help map to the documented exit codes") {
  CHECK(run_cli("--help").code == 0);
  CHECK(run_cli("").code == 2);              // a subcommand is required
  CHECK(run_cli("transmogrify").code == 2);  // unknown subcommand
  CHECK(run_cli("train").code == 2);         // missing --config
  CHECK(run_cli("eval --checkpoint x").code == 2);  // missing --manifest
}

TEST_CASE("gen-data writes the dataset inventory deterministically") {
  const fs::path dir = scratch("gen");
  const fs::path cfg = write_config(dir, tiny_config(2, "ft"));

  const CliRun a = run_cli("gen-data --spec \"" + cfg.string() + "\" --out \"" +
                           (dir / "a").string() + "\"");
  REQUIRE(a.code == 0);
  CHECK(a.out.find("alpha: train 12, database 6, queries 6") != std::string::npos);
  CHECK(a.out.find("beta:") != std::string::npos);
  for (const char* f : {"manifest.json", "index.csv", "clouds/000000.pcpr"}) {
    CHECK(fs::exists(dir / "a" / "alpha" / f));
  }

  const CliRun b = run_cli("gen-data --spec \"" + cfg.string() + "\" --out \"" +
                           (dir / "b").string() + "\"");
  REQUIRE(b.code == 0);
  for (const char* f : {"manifest.json", "index.csv", "clouds/000000.pcpr",
                        "clouds/000023.pcpr"}) {
    CHECK(slurp(dir / "a" / "alpha" / f) == slurp(dir / "b" / "alpha" / f));
  }
  fs::remove_all(dir);
}

TEST_CASE("gen-data rejects invalid domain statistics naming the field") {
  const fs::path dir = scratch("genbad");
  json doc = tiny_config(1, "ft");
  doc["domains"][0]["synthetic"]["num_places"] = 1;
  const fs::path cfg = write_config(dir, doc);
  const CliRun r =
      run_cli("gen-data --spec \"" + cfg.string() + "\" --out \"" + (dir / "o").string() + "\"");
  CHECK(r.code == 2);
  CHECK(r.err.find("num_places") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("train emits the full artifact set and a readable summary") {
  const fs::path dir = scratch("train");
  const fs::path cfg = write_config(dir, tiny_config(2, "incloud"));
  const fs::path out = dir / "run";

  const CliRun r =
      run_cli("train --config \"" + cfg.string() + "\" --out \"" + out.string() + "\"");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("mR@1: ") != std::string::npos);
  CHECK(r.out.find("F: ") != std::string::npos);
  CHECK(r.out.find("artifacts: ") != std::string::npos);

  for (const char* f : {"config.json", "recall_matrix.csv", "report.json", "runlog.jsonl"}) {
    CHECK(fs::exists(out / f));
  }
  CHECK(fs::exists(out / "checkpoints" / "step_1" / "encoder.pcprw"));
  CHECK(fs::exists(out / "checkpoints" / "step_2" / "encoder.pcprw"));
  CHECK(fs::exists(out / "checkpoints" / "step_2" / "memory.json"));

  std::istringstream csv(slurp(out / "recall_matrix.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 3);  // header + one row per step
  fs::remove_all(dir);
}

TEST_CASE("a two-step protocol over four domains yields a two-row matrix") {
  const fs::path dir = scratch("twostep");
  json doc = tiny_config(4, "ft");
  doc["protocol"] = "two-step";
  doc["epochs"] = 1;
  const fs::path cfg = write_config(dir, doc);
  const fs::path out = dir / "run";
  REQUIRE(run_cli("train --config \"" + cfg.string() + "\" --out \"" + out.string() + "\"")
              .code == 0);
  std::istringstream csv(slurp(out / "recall_matrix.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 3);
  CHECK(fs::exists(out / "checkpoints" / "step_2"));
  CHECK_FALSE(fs::exists(out / "checkpoints" / "step_3"));
  fs::remove_all(dir);
}

TEST_CASE("train resumes from a checkpoint and reproduces the matrix byte for byte") {
  const fs::path dir = scratch("resume");
  const fs::path cfg = write_config(dir, tiny_config(2, "incloud"));
  const fs::path out = dir / "run";
  REQUIRE(run_cli("train --config \"" + cfg.string() + "\" --out \"" + out.string() + "\"")
              .code == 0);
  const std::string full = slurp(out / "recall_matrix.csv");

  const CliRun r = run_cli("train --config \"" + cfg.string() + "\" --out \"" + out.string() +
                           "\" --resume-from 1");
  REQUIRE(r.code == 0);
  CHECK(slurp(out / "recall_matrix.csv") == full);
  fs::remove_all(dir);
}

TEST_CASE("config and runtime failures use distinct exit codes") {
  const fs::path dir = scratch("fail");

  {  // Unparseable JSON never reaches training.
    const fs::path bad = dir / "bad.json";
    std::ofstream(bad) << "{nope";
    const CliRun r =
        run_cli("train --config \"" + bad.string() + "\" --out \"" + (dir / "o").string() + "\"");
    CHECK(r.code == 2);
    CHECK(r.err.find("config error") != std::string::npos);
  }
  {  // No output directory anywhere.
    const fs::path cfg = write_config(dir, tiny_config(2, "ft"));
    const CliRun r = run_cli("train --config \"" + cfg.string() + "\"");
    CHECK(r.code == 2);
    CHECK(r.err.find("output directory") != std::string::npos);
  }
  {  // Valid config whose dataset cannot be materialized fails at run time.
    json doc = tiny_config(2, "ft");
    doc["domains"][0].erase("synthetic");
    doc["domains"][0]["manifest"] = (dir / "missing" / "manifest.json").string();
    const fs::path cfg = write_config(dir, doc);
    const CliRun r =
        run_cli("train --config \"" + cfg.string() + "\" --out \"" + (dir / "o2").string() + "\"");
    CHECK(r.code == 3);
    CHECK(r.err.find("training failed") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("eval on the training datasets reproduces the training report") {
  const fs::path dir = scratch("eval");
  const fs::path cfg = write_config(dir, tiny_config(2, "ft"));
  const fs::path out = dir / "run";
  REQUIRE(run_cli("train --config \"" + cfg.string() + "\" --out \"" + out.string() + "\"")
              .code == 0);
  const json trained = json::parse(slurp(out / "report.json"));

  const std::string ckpt = (out / "checkpoints" / "step_2" / "encoder.pcprw").string();
  const fs::path rep = dir / "eval-report.json";
  const CliRun r = run_cli("eval --checkpoint \"" + ckpt + "\" --manifest \"" +
                           (out / "data" / "alpha").string() + "\" --manifest \"" +
                           (out / "data" / "beta").string() + "\" --recall-n 1,5 --out \"" +
                           rep.string() + "\"");
  REQUIRE(r.code == 0);
  const json evaled = json::parse(slurp(rep));
  CHECK(evaled["mean_recall_at_1"] == trained["mean_recall_at_1"]);
  CHECK(evaled["final_recall_per_domain"] == trained["final_recall_per_domain"]);
  CHECK(evaled["recall_at_n"] == trained["recall_at_n"]);
  fs::remove_all(dir);
}

TEST_CASE("eval recall cutoffs follow --recall-n exactly") {
  const fs::path dir = scratch("evaln");
  const fs::path cfg = write_config(dir, tiny_config(1, "ft"));
  REQUIRE(run_cli("gen-data --spec \"" + cfg.string() + "\" --out \"" + (dir / "d").string() +
                  "\"")
              .code == 0);
  pcpr::EncoderConfig enc;
  enc.hidden_dims = {4};
  enc.descriptor_dim = 3;
  enc.seed = 21;
  pcpr::save_params(pcpr::init_params(enc), dir / "enc.pcprw");

  const fs::path rep = dir / "rep.json";
  const CliRun r = run_cli("eval --checkpoint \"" + (dir / "enc.pcprw").string() +
                           "\" --manifest \"" + (dir / "d" / "alpha").string() +
                           "\" --recall-n 1,3 --out \"" + rep.string() + "\"");
  REQUIRE(r.code == 0);
  CHECK(r.out.find("R@1: ") != std::string::npos);
  CHECK(r.out.find("R@3: ") != std::string::npos);
  const json doc = json::parse(slurp(rep));
  CHECK(doc["recall_at_n"].size() == 2);
  CHECK(doc["recall_at_n"].contains("1"));
  CHECK(doc["recall_at_n"].contains("3"));

  CHECK(run_cli("eval --checkpoint \"" + (dir / "enc.pcprw").string() + "\" --manifest \"" +
                (dir / "d" / "alpha").string() + "\" --recall-n 0")
            .code == 2);
  fs::remove_all(dir);
}

TEST_CASE("eval rejects an incompatible checkpoint") {
  const fs::path dir = scratch("evalbad");
  const fs::path cfg = write_config(dir, tiny_config(1, "ft"));
  REQUIRE(run_cli("gen-data --spec \"" + cfg.string() + "\" --out \"" + (dir / "d").string() +
                  "\"")
              .code == 0);
  // A five-channel encoder cannot consume three-column clouds.
  pcpr::EncoderConfig wide;
  wide.in_dim = 5;
  wide.hidden_dims = {4};
  wide.descriptor_dim = 3;
  wide.seed = 22;
  pcpr::save_params(pcpr::init_params(wide), dir / "wide.pcprw");

  const CliRun r = run_cli("eval --checkpoint \"" + (dir / "wide.pcprw").string() +
                           "\" --manifest \"" + (dir / "d" / "alpha").string() + "\"");
  CHECK(r.code == 4);
  CHECK(r.err.find("eval error") != std::string::npos);

  const CliRun junk = run_cli("eval --checkpoint \"" + cfg.string() + "\" --manifest \"" +
                              (dir / "d" / "alpha").string() + "\"");
  CHECK(junk.code == 4);
  fs::remove_all(dir);
}

TEST_CASE("PCPR_THREADS is validated before any work starts") {
  const fs::path dir = scratch("threads");
  const fs::path cfg = write_config(dir, tiny_config(1, "ft"));
  const std::string gen =
      "gen-data --spec \"" + cfg.string() + "\" --out \"" + (dir / "o").string() + "\"";
  CHECK(run_cli(gen, "PCPR_THREADS=2 ").code == 0);
  const CliRun bad = run_cli(gen, "PCPR_THREADS=lots ");
  CHECK(bad.code == 2);
  CHECK(bad.err.find("PCPR_THREADS") != std::string::npos);
  CHECK(run_cli(gen, "PCPR_THREADS=0 ").code == 2);
  fs::remove_all(dir);
}

TEST_CASE("selfcheck passes clean and fails loudly under fault injection") {
  const CliRun clean = run_cli("selfcheck");
  CHECK(clean.code == 0);
  CHECK(clean.out.find("all 11 checks passed") != std::string::npos);
  CHECK(clean.out.find("[FAIL]") == std::string::npos);

  const CliRun injected = run_cli("selfcheck --inject-sa-sign-flip");
  CHECK(injected.code == 1);
  CHECK(injected.out.find("[FAIL] sa-gradient-fd") != std::string::npos);
  CHECK(injected.out.find("failed checks: sa-gradient-fd") != std::string::npos);
}
