#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

// End-to-end tests against the installed binary. Every case spawns the real
// executable, so exit codes, stderr wording and artifact bytes are exactly
// what a user sees.

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr combined
};

fs::path test_root() {
  static const fs::path root = [] {
    const fs::path p = fs::temp_directory_path() / "setinfer_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = test_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& body) {
  std::ofstream os(p);
  os << body;
  REQUIRE(os.good());
}

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path log = test_root() / ("cli_log_" + std::to_string(counter++) + ".txt");
  const std::string cmd =
      std::string("\"") + SETINFER_CLI_PATH + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  if (WIFEXITED(raw)) r.exit_code = WEXITSTATUS(raw);
  r.output = slurp(log);
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

/// Non-empty lines that are not metadata or footer comments; the first one is
/// the header for CSV artifacts.
std::vector<std::string> data_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

std::string meta_line(const std::string& text, const std::string& key) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("# " + key + ":", 0) == 0) return line;
  }
  return "";
}

const std::string kMvnBlock =
    "model = mvn\n"
    "mvn.n_max = 15\n"
    "mvn.draws_per_event = 2\n";

const std::string kTinyHierTrain =
    "train.kind = hier\n"
    "train.dataset_count = 64\n"
    "train.batch_size = 16\n"
    "train.epochs = 2\n"
    "train.patience = 3\n"
    "train.enc_hidden = 16,16\n"
    "train.embed = 8\n"
    "train.dec_hidden = 8\n";

// Shared artifacts, trained or simulated once and reused across cases.

const fs::path& mvn_checkpoint() {
  static const fs::path path = [] {
    const fs::path dir = fresh_dir("shared_mvn_ck");
    spit(dir / "cfg", kMvnBlock + "seed = 7\n" + kTinyHierTrain);
    const auto r = run_cli("train --config \"" + (dir / "cfg").string() + "\" --out \"" +
                           dir.string() + "\"");
    REQUIRE(r.exit_code == 0);
    return dir / "checkpoint.txt";
  }();
  return path;
}

const fs::path& mvn_dataset() {
  static const fs::path path = [] {
    const fs::path dir = fresh_dir("shared_mvn_data");
    spit(dir / "cfg", kMvnBlock + "seed = 42\nsimulate.count = 4\nsimulate.per_file = 4\n");
    const auto r = run_cli("simulate --config \"" + (dir / "cfg").string() + "\" --out \"" +
                           dir.string() + "\"");
    REQUIRE(r.exit_code == 0);
    return dir / "datasets_00000.events";
  }();
  return path;
}

const fs::path& freq_checkpoint() {
  static const fs::path path = [] {
    const fs::path dir = fresh_dir("shared_freq_ck");
    spit(dir / "cfg",
         "model = rate_mixture\nseed = 11\n"
         "train.kind = freq\n"
         "train.steps = 30\n"
         "train.positives = 4\n"
         "train.negatives = 4\n"
         "train.eval_every = 10\n"
         "train.val_batches = 1\n"
         "train.enc_hidden = 16,16\n"
         "train.embed = 8\n"
         "train.dec_hidden = 8\n");
    const auto r = run_cli("train --config \"" + (dir / "cfg").string() + "\" --out \"" +
                           dir.string() + "\"");
    REQUIRE(r.exit_code == 0);
    return dir / "checkpoint.txt";
  }();
  return path;
}

const fs::path& rate_dataset() {
  static const fs::path path = [] {
    const fs::path dir = fresh_dir("shared_rate_data");
    spit(dir / "cfg",
         "model = rate_mixture\nseed = 13\nsimulate.count = 4\nsimulate.per_file = 4\n"
         "simulate.prefix = rate\n");
    const auto r = run_cli("simulate --config \"" + (dir / "cfg").string() + "\" --out \"" +
                           dir.string() + "\"");
    REQUIRE(r.exit_code == 0);
    return dir / "rate_00000.events";
  }();
  return path;
}

const fs::path& bump_checkpoint() {
  static const fs::path path = [] {
    const fs::path dir = fresh_dir("shared_bump_ck");
    spit(dir / "cfg",
         "model = bump_hunt\nseed = 23\n"
         "train.kind = hier\n"
         "train.dataset_count = 32\n"
         "train.batch_size = 16\n"
         "train.epochs = 1\n"
         "train.enc_hidden = 16\n"
         "train.embed = 8\n"
         "train.dec_hidden = 8\n");
    const auto r = run_cli("train --config \"" + (dir / "cfg").string() + "\" --out \"" +
                           dir.string() + "\"");
    REQUIRE(r.exit_code == 0);
    return dir / "checkpoint.txt";
  }();
  return path;
}

}  // namespace

TEST_CASE("help and argument errors") {
  const auto help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK(contains(help.output, "simulate"));
  CHECK(contains(help.output, "compare-bayes"));

  CHECK(run_cli("simulate").exit_code == 2);
  CHECK(run_cli("frobnicate --config x").exit_code == 2);

  const auto missing = run_cli("simulate --config /nonexistent/path.cfg");
  CHECK(missing.exit_code == 2);
  CHECK(contains(missing.output, "/nonexistent/path.cfg"));
}

TEST_CASE("config file syntax is validated") {
  const fs::path dir = fresh_dir("cfg_syntax");

  spit(dir / "noeq.cfg", "model mvn\n");
  auto r = run_cli("simulate --config \"" + (dir / "noeq.cfg").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "noeq.cfg:1"));

  spit(dir / "dup.cfg", "seed = 1\nseed = 2\n");
  r = run_cli("simulate --config \"" + (dir / "dup.cfg").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "duplicate config key 'seed'"));

  spit(dir / "badkey.cfg", "Seed = 1\n");
  r = run_cli("simulate --config \"" + (dir / "badkey.cfg").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "bad config key 'Seed'"));

  spit(dir / "empty.cfg", "seed =\n");
  r = run_cli("simulate --config \"" + (dir / "empty.cfg").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "empty value"));
}

TEST_CASE("config schema is strict") {
  const fs::path dir = fresh_dir("cfg_schema");

  spit(dir / "unknown.cfg", kMvnBlock + "simulate.count = 1\nsimulate.prefx = x\n");
  auto r = run_cli("simulate --config \"" + (dir / "unknown.cfg").string() + "\" --out \"" +
                   (dir / "o1").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "unknown config key"));
  CHECK(contains(r.output, "'simulate.prefx'"));

  spit(dir / "missing.cfg", kMvnBlock);
  r = run_cli("simulate --config \"" + (dir / "missing.cfg").string() + "\" --out \"" +
              (dir / "o2").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "missing required config key 'simulate.count'"));

  spit(dir / "badint.cfg", kMvnBlock + "simulate.count = three\n");
  r = run_cli("simulate --config \"" + (dir / "badint.cfg").string() + "\" --out \"" +
              (dir / "o3").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "'simulate.count'"));

  spit(dir / "badmodel.cfg", "model = galaxy\nsimulate.count = 1\n");
  r = run_cli("simulate --config \"" + (dir / "badmodel.cfg").string() + "\" --out \"" +
              (dir / "o4").string() + "\"");
  CHECK(r.exit_code == 2);

  // the model is required for simulation but the key lives in the config,
  // not on the command line
  spit(dir / "nomodel.cfg", "simulate.count = 1\n");
  r = run_cli("simulate --config \"" + (dir / "nomodel.cfg").string() + "\" --out \"" +
              (dir / "o5").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "'model'"));
}

TEST_CASE("simulate writes shards and a manifest") {
  const fs::path dir = fresh_dir("simulate_basic");
  spit(dir / "cfg", kMvnBlock + "seed = 42\nsimulate.count = 7\nsimulate.per_file = 3\n");

  const auto r = run_cli("simulate --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  REQUIRE(r.exit_code == 0);
  for (const char* f : {"datasets_00000.events", "datasets_00001.events", "datasets_00002.events",
                        "manifest.txt"}) {
    CHECK(fs::exists(dir / "run" / f));
  }
  const std::string man = slurp(dir / "run" / "manifest.txt");
  CHECK(contains(man, "count: 7"));
  CHECK(contains(man, "shards: 3"));
  CHECK(contains(man, "model: mvn"));
  CHECK(contains(man, "cardinality_hist:"));
  CHECK(contains(man, "truth_mean_p0:"));
  CHECK(!meta_line(man, "config_hash").empty());
  CHECK(!meta_line(man, "master_seed").empty());
  CHECK(!meta_line(man, "command").empty());

  // every shard opens with the format magic followed by run metadata
  const std::string shard = slurp(dir / "run" / "datasets_00000.events");
  CHECK(shard.rfind("setinfer-eventset v1", 0) == 0);
  CHECK(contains(shard, "config_hash: "));
}

TEST_CASE("simulate with zero count still writes the manifest") {
  const fs::path dir = fresh_dir("simulate_zero");
  spit(dir / "cfg", kMvnBlock + "simulate.count = 0\n");
  const auto r = run_cli("simulate --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  REQUIRE(r.exit_code == 0);
  const std::string man = slurp(dir / "run" / "manifest.txt");
  CHECK(contains(man, "count: 0"));
  CHECK(contains(man, "shards: 0"));
  for (const auto& entry : fs::directory_iterator(dir / "run")) {
    CHECK(entry.path().extension() != ".events");
  }
}

TEST_CASE("simulate output is identical across output dirs and worker counts") {
  const fs::path dir = fresh_dir("simulate_repro");
  spit(dir / "cfg", kMvnBlock + "seed = 42\nsimulate.count = 7\nsimulate.per_file = 3\n");
  const std::string cfg = (dir / "cfg").string();

  REQUIRE(run_cli("simulate --config \"" + cfg + "\" --out \"" + (dir / "a").string() +
                  "\" --workers 1").exit_code == 0);
  REQUIRE(run_cli("simulate --config \"" + cfg + "\" --out \"" + (dir / "b").string() +
                  "\" --workers 4").exit_code == 0);
  for (const char* f : {"datasets_00000.events", "datasets_00001.events", "datasets_00002.events",
                        "manifest.txt"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }

  // a different master seed changes both the data and the recorded hash
  REQUIRE(run_cli("simulate --config \"" + cfg + "\" --out \"" + (dir / "c").string() +
                  "\" --seed 99").exit_code == 0);
  CHECK(slurp(dir / "a" / "datasets_00000.events") != slurp(dir / "c" / "datasets_00000.events"));
  CHECK(meta_line(slurp(dir / "a" / "manifest.txt"), "config_hash") !=
        meta_line(slurp(dir / "c" / "manifest.txt"), "config_hash"));
  CHECK(contains(meta_line(slurp(dir / "c" / "manifest.txt"), "master_seed"), "99"));
}

TEST_CASE("train writes checkpoint, run log and report") {
  const fs::path ck = mvn_checkpoint();
  const fs::path dir = ck.parent_path();
  CHECK(fs::exists(dir / "runlog.csv"));
  CHECK(fs::exists(dir / "train_report.txt"));

  const std::string log = slurp(dir / "runlog.csv");
  CHECK(!meta_line(log, "config_hash").empty());
  const auto rows = data_lines(log);
  REQUIRE(rows.size() >= 2);
  CHECK(rows[0] == "step,lr,train_loss,val_loss");

  const std::string rep = slurp(dir / "train_report.txt");
  CHECK(contains(rep, "report: train"));
  CHECK(contains(rep, "config.kind: hier"));
  CHECK(contains(rep, "config.model: mvn"));
  CHECK(contains(rep, "cli.config_hash:"));

  const std::string ck_text = slurp(ck);
  CHECK(contains(ck_text, "meta config.kind hier"));
  CHECK(contains(ck_text, "meta cli.config_hash "));
}

TEST_CASE("train validates kind and resume path") {
  const fs::path dir = fresh_dir("train_invalid");

  spit(dir / "kind.cfg", kMvnBlock + "train.kind = banana\n");
  auto r = run_cli("train --config \"" + (dir / "kind.cfg").string() + "\" --out \"" +
                   (dir / "o1").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "train.kind"));

  spit(dir / "resume.cfg",
       kMvnBlock + kTinyHierTrain + "train.resume = " + (dir / "no_such_ck.txt").string() + "\n");
  r = run_cli("train --config \"" + (dir / "resume.cfg").string() + "\" --out \"" +
              (dir / "o2").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "no_such_ck.txt"));

  // the checkpoint kind must match the requested training kind
  spit(dir / "mismatch.cfg",
       kMvnBlock + kTinyHierTrain + "train.resume = " + freq_checkpoint().string() + "\n");
  r = run_cli("train --config \"" + (dir / "mismatch.cfg").string() + "\" --out \"" +
              (dir / "o3").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "'freq'"));
}

TEST_CASE("divergent training exits with the numeric failure code") {
  const fs::path dir = fresh_dir("train_diverge");
  spit(dir / "cfg", kMvnBlock + "seed = 7\n" + kTinyHierTrain + "train.lr = 1e18\n");
  const auto r = run_cli("train --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  CHECK(r.exit_code == 4);
  CHECK(contains(r.output, "non-finite"));
  // the report survives with an explicit failure marker
  CHECK(contains(slurp(dir / "run" / "train_report.txt"), "FAILED:"));
  CHECK(!fs::exists(dir / "run" / "checkpoint.txt"));
}

TEST_CASE("warm started training is deterministic and actually warm") {
  const fs::path dir = fresh_dir("train_resume");
  spit(dir / "cfg",
       kMvnBlock + "seed = 7\n" + kTinyHierTrain +
           "train.resume = " + mvn_checkpoint().string() + "\n");
  const std::string cfg = (dir / "cfg").string();
  REQUIRE(run_cli("train --config \"" + cfg + "\" --out \"" + (dir / "a").string() + "\"")
              .exit_code == 0);
  REQUIRE(run_cli("train --config \"" + cfg + "\" --out \"" + (dir / "b").string() + "\"")
              .exit_code == 0);
  // identical seeds and identical warm start reproduce the loss trajectory
  CHECK(slurp(dir / "a" / "runlog.csv") == slurp(dir / "b" / "runlog.csv"));
  // and the warm start moved the first losses away from the cold start
  CHECK(data_lines(slurp(dir / "a" / "runlog.csv"))[1] !=
        data_lines(slurp(mvn_checkpoint().parent_path() / "runlog.csv"))[1]);
}

TEST_CASE("infer reports the posterior for one dataset") {
  const fs::path dir = fresh_dir("infer_basic");
  spit(dir / "cfg", kMvnBlock +
                        "infer.checkpoint = " + mvn_checkpoint().string() + "\n" +
                        "infer.dataset = " + mvn_dataset().string() + "\n" +
                        "infer.index = 1\n" + "infer.prefix_curve = true\n");
  const auto r = run_cli("infer --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  REQUIRE(r.exit_code == 0);

  const std::string rep = slurp(dir / "run" / "infer_report.csv");
  const auto rows = data_lines(rep);
  REQUIRE(rows.size() == 4);  // header plus one row per parameter
  CHECK(rows[0] == "dimension,mean,sd,truth");
  CHECK(!meta_line(rep, "config_hash").empty());

  // the prefix curve has one row per (cardinality, dimension) pair
  const std::string cl = meta_line(rep, "cardinality");
  REQUIRE(!cl.empty());
  const long long card = std::stoll(cl.substr(cl.find(": ") + 2));
  const auto curve = data_lines(slurp(dir / "run" / "infer_prefix_curve.csv"));
  CHECK(curve.size() == static_cast<std::size_t>(card) * 3 + 1);
  CHECK(curve[0] == "cardinality,dimension,mean,sd");
}

TEST_CASE("infer validates inputs") {
  const fs::path dir = fresh_dir("infer_invalid");

  spit(dir / "nods.cfg", kMvnBlock + "infer.checkpoint = " + mvn_checkpoint().string() +
                             "\ninfer.dataset = " + (dir / "missing.events").string() + "\n");
  auto r = run_cli("infer --config \"" + (dir / "nods.cfg").string() + "\" --out \"" +
                   (dir / "o1").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "missing.events"));

  spit(dir / "idx.cfg", kMvnBlock + "infer.checkpoint = " + mvn_checkpoint().string() +
                            "\ninfer.dataset = " + mvn_dataset().string() +
                            "\ninfer.index = 99\n");
  r = run_cli("infer --config \"" + (dir / "idx.cfg").string() + "\" --out \"" +
              (dir / "o2").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "infer.index"));

  // declared model must match the checkpoint
  spit(dir / "model.cfg", "model = rate_mixture\ninfer.checkpoint = " +
                              mvn_checkpoint().string() +
                              "\ninfer.dataset = " + rate_dataset().string() + "\n");
  r = run_cli("infer --config \"" + (dir / "model.cfg").string() + "\" --out \"" +
              (dir / "o3").string() + "\"");
  CHECK(r.exit_code == 2);
  CHECK(contains(r.output, "does not match"));

  // a test-statistic checkpoint is not a posterior estimator
  spit(dir / "kind.cfg", "infer.checkpoint = " + freq_checkpoint().string() +
                             "\ninfer.dataset = " + rate_dataset().string() + "\n");
  r = run_cli("infer --config \"" + (dir / "kind.cfg").string() + "\" --out \"" +
              (dir / "o4").string() + "\"");
  CHECK(r.exit_code == 2);
}

TEST_CASE("corrupt inputs and unwritable outputs map to the io exit code") {
  const fs::path dir = fresh_dir("io_errors");

  spit(dir / "garbage.events", "this is not an eventset\n");
  spit(dir / "ds.cfg", kMvnBlock + "infer.checkpoint = " + mvn_checkpoint().string() +
                           "\ninfer.dataset = " + (dir / "garbage.events").string() + "\n");
  auto r = run_cli("infer --config \"" + (dir / "ds.cfg").string() + "\" --out \"" +
                   (dir / "o1").string() + "\"");
  CHECK(r.exit_code == 3);
  CHECK(contains(r.output, "garbage.events"));

  spit(dir / "garbage_ck.txt", "not a checkpoint\n");
  spit(dir / "ck.cfg", kMvnBlock + "infer.checkpoint = " + (dir / "garbage_ck.txt").string() +
                           "\ninfer.dataset = " + mvn_dataset().string() + "\n");
  r = run_cli("infer --config \"" + (dir / "ck.cfg").string() + "\" --out \"" +
              (dir / "o2").string() + "\"");
  CHECK(r.exit_code == 3);

  spit(dir / "sim.cfg", kMvnBlock + "simulate.count = 1\n");
  r = run_cli("simulate --config \"" + (dir / "sim.cfg").string() +
              "\" --out /proc/setinfer_forbidden");
  CHECK(r.exit_code == 3);
}

TEST_CASE("scan tabulates the test statistic over the grid") {
  const fs::path dir = fresh_dir("scan_basic");
  spit(dir / "cfg", "scan.checkpoint = " + freq_checkpoint().string() +
                        "\nscan.dataset = " + rate_dataset().string() +
                        "\nscan.index = 2\nscan.grid_points = 9\n");
  const auto r = run_cli("scan --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  REQUIRE(r.exit_code == 0);
  const std::string rep = slurp(dir / "run" / "scan_report.csv");
  const auto rows = data_lines(rep);
  REQUIRE(rows.size() == 10);  // header plus nine grid points
  CHECK(rows[0] == "theta,s,logit");
  CHECK(!meta_line(rep, "theta_hat").empty());
  CHECK(!meta_line(rep, "argmin_index").empty());

  // a posterior checkpoint is rejected
  spit(dir / "kind.cfg", "scan.checkpoint = " + mvn_checkpoint().string() +
                             "\nscan.dataset = " + rate_dataset().string() + "\n");
  CHECK(run_cli("scan --config \"" + (dir / "kind.cfg").string() + "\" --out \"" +
                (dir / "o2").string() + "\"")
            .exit_code == 2);

  // the grid must be a proper interval
  spit(dir / "grid.cfg", "scan.checkpoint = " + freq_checkpoint().string() +
                             "\nscan.dataset = " + rate_dataset().string() +
                             "\nscan.grid_lo = 7\nscan.grid_hi = 3\n");
  CHECK(run_cli("scan --config \"" + (dir / "grid.cfg").string() + "\" --out \"" +
                (dir / "o3").string() + "\"")
            .exit_code == 2);
}

TEST_CASE("coverage writes a cell table and a summary") {
  const fs::path dir = fresh_dir("coverage_basic");
  spit(dir / "cfg", kMvnBlock + "seed = 31\ncoverage.checkpoint = " + mvn_checkpoint().string() +
                        "\ncoverage.replicas = 100\ncoverage.alphas = 0.1,0.5\n"
                        "coverage.cardinalities = 1,5\n");
  const auto r = run_cli("coverage --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  REQUIRE(r.exit_code == 0);
  const std::string csv = slurp(dir / "run" / "coverage_report.csv");
  const auto rows = data_lines(csv);
  REQUIRE(rows.size() == 5);  // header plus 2 alphas x 2 cardinalities
  CHECK(rows[0] == "alpha,cardinality,hits,trials,coverage,se");
  const std::string sum = slurp(dir / "run" / "coverage_summary.txt");
  CHECK(contains(sum, "report: coverage"));
  CHECK(contains(sum, "worst_abs_gap:"));

  // too few replicas fails fast but leaves a marked partial file
  spit(dir / "few.cfg", kMvnBlock + "coverage.checkpoint = " + mvn_checkpoint().string() +
                            "\ncoverage.replicas = 50\n");
  const auto bad = run_cli("coverage --config \"" + (dir / "few.cfg").string() + "\" --out \"" +
                           (dir / "bad").string() + "\"");
  CHECK(bad.exit_code == 2);
  CHECK(contains(slurp(dir / "bad" / "coverage_report.csv"), "FAILED:"));
}

TEST_CASE("compare-freq writes curves, ranks and point estimates") {
  const fs::path dir = fresh_dir("cfreq_basic");
  spit(dir / "cfg",
       "model = rate_mixture\nseed = 19\n"
       "compare_freq.checkpoint = " + freq_checkpoint().string() + "\n" +
       "compare_freq.datasets = 6\n"
       "compare_freq.grid_points = 11\n"
       "compare_freq.curve_examples = 2\n"
       "compare_freq.theta_cond = 4,5,6\n");
  const auto r = run_cli("compare-freq --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\" --workers 3");
  REQUIRE(r.exit_code == 0);

  const auto curves = data_lines(slurp(dir / "run" / "compare_freq_curves.csv"));
  CHECK(curves.size() == 2 * 11 + 1);
  CHECK(curves[0] == "dataset,theta,s,t");

  const auto bij = data_lines(slurp(dir / "run" / "compare_freq_bijectivity.csv"));
  CHECK(bij.size() == 3 + 1);
  CHECK(bij[0] == "theta_cond,count,spearman_rho,isotonic_rms");

  const std::string pts = slurp(dir / "run" / "compare_freq_points.csv");
  CHECK(data_lines(pts).size() == 6 + 1);
  CHECK(!meta_line(pts, "rmse_neural_vs_oracle").empty());

  const std::string sum = slurp(dir / "run" / "compare_freq_summary.txt");
  CHECK(contains(sum, "min_spearman_rho:"));
  CHECK(contains(sum, "rmse_neural_vs_oracle:"));
}

TEST_CASE("compare-bayes reports widths per method") {
  const fs::path dir = fresh_dir("cbayes_basic");
  spit(dir / "cfg",
       "model = bump_hunt\nseed = 29\n"
       "compare_bayes.checkpoint = " + bump_checkpoint().string() + "\n" +
       "compare_bayes.theta_nu = 0\n"
       "compare_bayes.replicas = 2\n"
       "compare_bayes.mcmc_samples = 600\n"
       "compare_bayes.mcmc_burnin = 200\n");
  const auto r = run_cli("compare-bayes --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\" --workers 2");
  REQUIRE(r.exit_code == 0);

  const auto rows = data_lines(slurp(dir / "run" / "compare_bayes_report.csv"));
  REQUIRE(rows.size() == 4 + 1);  // header plus one row per method
  CHECK(rows[0] == "theta_nu_true,method,median_sigma_theta,p16_sigma_theta,p84_sigma_theta,replicas");
  CHECK(contains(rows[1], "neural"));
  CHECK(contains(rows[2], "mcmc_raw"));
  CHECK(contains(rows[3], "mcmc_nom"));
  CHECK(contains(rows[4], "mcmc_marg"));

  const std::string sum = slurp(dir / "run" / "compare_bayes_summary.txt");
  CHECK(contains(sum, "neural_over_raw:"));

  // a rate_mixture model contradicts the command
  spit(dir / "model.cfg", "model = rate_mixture\ncompare_bayes.checkpoint = " +
                              bump_checkpoint().string() + "\n");
  CHECK(run_cli("compare-bayes --config \"" + (dir / "model.cfg").string() + "\" --out \"" +
                (dir / "o2").string() + "\"")
            .exit_code == 2);
}

TEST_CASE("bench reports wall clock totals and the cost ratio") {
  const fs::path dir = fresh_dir("bench_basic");
  spit(dir / "cfg", "model = rate_mixture\nseed = 11\nbench.checkpoint = " +
                        freq_checkpoint().string() +
                        "\nbench.datasets = 4\nbench.grid_points = 11\n");
  const auto r = run_cli("bench --config \"" + (dir / "cfg").string() + "\" --out \"" +
                         (dir / "run").string() + "\"");
  REQUIRE(r.exit_code == 0);
  const std::string rep = slurp(dir / "run" / "bench_report.txt");
  CHECK(contains(rep, "report: speed_bench"));
  CHECK(contains(rep, "neural_total_ms:"));
  CHECK(contains(rep, "reference_total_ms:"));
  CHECK(contains(rep, "ratio:"));
}

TEST_CASE("artifact hashes identify the configuration, not the output path") {
  const fs::path dir = fresh_dir("hash_identity");
  spit(dir / "cfg", kMvnBlock + "seed = 5\nsimulate.count = 2\nsimulate.per_file = 2\n");
  const std::string cfg = (dir / "cfg").string();
  REQUIRE(run_cli("simulate --config \"" + cfg + "\" --out \"" + (dir / "x").string() + "\"")
              .exit_code == 0);
  REQUIRE(run_cli("simulate --config \"" + cfg + "\" --out \"" + (dir / "y").string() + "\"")
              .exit_code == 0);
  const std::string hx = meta_line(slurp(dir / "x" / "manifest.txt"), "config_hash");
  const std::string hy = meta_line(slurp(dir / "y" / "manifest.txt"), "config_hash");
  REQUIRE(!hx.empty());
  CHECK(hx == hy);
}
