#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dynrep/harness/pipeline.hpp"
#include "dynrep/harness/selftest.hpp"

using namespace dynrep;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("dynrep_harness_" + std::to_string(Catch::rngSeed()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

ExperimentConfig micro_config(const std::string& out) {
  ExperimentConfig cfg;
  cfg.dataset.systems = {"advdiff"};
  cfg.dataset.height = cfg.dataset.width = 16;
  cfg.dataset.frames = 12;
  cfg.dataset.pretrain = 4;
  cfg.dataset.labeled = 6;
  cfg.dataset.seed = 5;
  cfg.methods = {"jepa"};
  cfg.pretrain.epochs = 1;
  cfg.pretrain.batch = 4;
  cfg.pretrain.encoder.context_frames = 4;
  cfg.pretrain.encoder.widths = {8, 16};
  cfg.pretrain.encoder.downsample = 4;
  cfg.pretrain.encoder.embed_dim = 16;
  cfg.pretrain.predictor.embed_dim = 16;
  cfg.pretrain.predictor.ratio = 2;
  cfg.pretrain.predictor.depth = 1;
  cfg.pretrain.mae.frames = 4;
  cfg.pretrain.mae.enc_dim = 32;
  cfg.pretrain.mae.enc_depth = 1;
  cfg.pretrain.mae.dec_dim = 16;
  cfg.pretrain.mae.dec_depth = 1;
  cfg.pretrain.mae.mask_ratio = 0.5;
  cfg.probe.epochs = 3;
  cfg.probe.batch = 8;
  cfg.probe.probe_dim = 16;
  cfg.probe.windows_per_traj = 2;
  cfg.fractions = {1.0};
  cfg.probe_seeds = {1};
  cfg.out = out;
  return cfg;
}

EvalReport make_row(const std::string& method, const std::string& system,
                    double fraction, uint64_t seed, double mse) {
  EvalReport r;
  r.method = method;
  r.system = system;
  r.fraction = fraction;
  r.seed = seed;
  r.param_mse = {mse, mse};
  r.avg_mse = mse;
  return r;
}

}  // namespace

TEST_CASE("experiment config round-trips and validates") {
  ExperimentConfig cfg;
  nlohmann::json j = cfg;
  ExperimentConfig back = j.get<ExperimentConfig>();
  CHECK(nlohmann::json(back).dump() == j.dump());
  CHECK(cfg.dataset.systems.size() == 3);
  CHECK(cfg.methods == std::vector<std::string>{"jepa", "mae"});
  cfg.validate();

  ExperimentConfig bad = cfg;
  bad.methods = {"diffusion"};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.fractions = {0.0};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.dataset.systems = {"weather"};
  CHECK_THROWS_AS(bad.validate(), Error);

  TempDir dir;
  CHECK_THROWS_AS(load_experiment_config(dir.str() + "/none.json"), Error);
  std::ofstream(dir.str() + "/bad.json") << "{not json";
  CHECK_THROWS_AS(load_experiment_config(dir.str() + "/bad.json"), Error);
  std::ofstream(dir.str() + "/partial.json")
      << R"({"dataset": {"labeled": 40}})";
  ExperimentConfig partial =
      load_experiment_config(dir.str() + "/partial.json");
  CHECK(partial.dataset.labeled == 40);
  CHECK(partial.dataset.pretrain == 512);  // untouched default
}

TEST_CASE("environment variables override single config leaves") {
  nlohmann::json tree = ExperimentConfig{};
  setenv("DYNREP_DATASET_LABELED", "64", 1);
  setenv("DYNREP_PRETRAIN_EPOCHS", "2", 1);
  setenv("DYNREP_PRETRAIN_VICREG_MU", "25.5", 1);
  setenv("DYNREP_FRACTIONS", "0.5,1.0", 1);
  setenv("DYNREP_METHODS", "mae", 1);
  setenv("DYNREP_OUT", "elsewhere", 1);
  apply_env_overrides(tree);
  unsetenv("DYNREP_DATASET_LABELED");
  unsetenv("DYNREP_PRETRAIN_EPOCHS");
  unsetenv("DYNREP_PRETRAIN_VICREG_MU");
  unsetenv("DYNREP_FRACTIONS");
  unsetenv("DYNREP_METHODS");
  unsetenv("DYNREP_OUT");

  ExperimentConfig cfg = tree.get<ExperimentConfig>();
  CHECK(cfg.dataset.labeled == 64);
  CHECK(cfg.pretrain.epochs == 2);
  CHECK(cfg.pretrain.vicreg.mu == 25.5);
  CHECK(cfg.fractions == std::vector<double>{0.5, 1.0});
  CHECK(cfg.methods == std::vector<std::string>{"mae"});
  CHECK(cfg.out == "elsewhere");

  setenv("DYNREP_DATASET_LABELED", "not_a_number", 1);
  nlohmann::json tree2 = ExperimentConfig{};
  CHECK_THROWS_AS(apply_env_overrides(tree2), Error);
  unsetenv("DYNREP_DATASET_LABELED");
}

TEST_CASE("config hashes are canonical and leaf-sensitive") {
  nlohmann::json a{{"alpha", 1}, {"beta", 2.5}};
  nlohmann::json b;
  b["beta"] = 2.5;
  b["alpha"] = 1;
  CHECK(config_hash(a) == config_hash(b));

  nlohmann::json c = a;
  c["beta"] = 2.6;
  CHECK(config_hash(a) != config_hash(c));
  CHECK(hash_hex(config_hash(a)).size() == 16);

  ExperimentConfig cfg = micro_config("x");
  std::string h = pretrain_hash(cfg, "jepa", "advdiff");
  ExperimentConfig cfg2 = cfg;
  cfg2.probe.epochs = 99;  // unrelated section: pretrain hash unchanged
  CHECK(pretrain_hash(cfg2, "jepa", "advdiff") == h);
  cfg2.pretrain.lr = 2e-3;
  CHECK(pretrain_hash(cfg2, "jepa", "advdiff") != h);
  CHECK(pretrain_hash(cfg, "mae", "advdiff") != h);

  ExperimentConfig relocated = cfg;
  relocated.out = "elsewhere";
  CHECK(experiment_hash(relocated) == experiment_hash(cfg));
  relocated.probe.epochs = 77;
  CHECK(experiment_hash(relocated) != experiment_hash(cfg));
}

TEST_CASE("ledger records stages and survives reload") {
  TempDir dir;
  std::string path = dir.str() + "/ledger.jsonl";
  std::string artifact = dir.str() + "/artifact.bin";
  std::ofstream(artifact) << "x";

  RunLedger ledger(path);
  CHECK_FALSE(ledger.completed("stage:a", "h1"));
  ledger.record({"stage:a", "h1", {artifact}});
  CHECK(ledger.completed("stage:a", "h1"));
  CHECK_FALSE(ledger.completed("stage:a", "h2"));

  RunLedger second(path);  // fresh load from disk
  CHECK(second.completed("stage:a", "h1"));

  second.record({"stage:a", "h2", {artifact}});
  CHECK_FALSE(second.completed("stage:a", "h1"));
  CHECK(second.completed("stage:a", "h2"));

  std::filesystem::remove(artifact);
  CHECK_FALSE(second.completed("stage:a", "h2"));  // artifact gone

  std::ofstream(path, std::ios::app) << "{broken\n";
  CHECK_THROWS_AS(RunLedger(path), Error);
}

TEST_CASE("generate is idempotent per ledger and reruns on config change") {
  TempDir dir;
  ExperimentConfig cfg = micro_config(dir.str() + "/run");
  RunLedger ledger(ledger_path(cfg));

  auto first = cmd_generate(cfg, ledger, false);
  REQUIRE(first.size() == 1);
  CHECK(first[0].ran);
  CHECK(std::filesystem::exists(first[0].artifacts[0]));

  auto again = cmd_generate(cfg, ledger, false);
  CHECK_FALSE(again[0].ran);

  auto forced = cmd_generate(cfg, ledger, true);
  CHECK(forced[0].ran);

  cfg.dataset.labeled = 7;
  auto changed = cmd_generate(cfg, ledger, false);
  CHECK(changed[0].ran);
}

TEST_CASE("pretrain cells cache, rerun on hash change, and guard resume") {
  TempDir dir;
  ExperimentConfig cfg = micro_config(dir.str() + "/run");
  RunLedger ledger(ledger_path(cfg));

  CHECK_THROWS_AS(cmd_pretrain_one(cfg, ledger, "jepa", "advdiff", false),
                  Error);  // dataset not generated yet

  cmd_generate(cfg, ledger, false);
  auto first = cmd_pretrain_one(cfg, ledger, "jepa", "advdiff", false);
  CHECK(first.ran);
  REQUIRE(std::filesystem::exists(first.artifacts[0]));
  nlohmann::json meta = read_checkpoint_meta(first.artifacts[0]);
  CHECK(meta.at("config_hash").get<std::string>() ==
        pretrain_hash(cfg, "jepa", "advdiff"));

  auto cached = cmd_pretrain_one(cfg, ledger, "jepa", "advdiff", false);
  CHECK_FALSE(cached.ran);

  // another epoch count: new hash, stale checkpoint must not be resumed
  ExperimentConfig cfg2 = cfg;
  cfg2.pretrain.epochs = 2;
  auto rerun = cmd_pretrain_one(cfg2, ledger, "jepa", "advdiff", false);
  CHECK(rerun.ran);
  meta = read_checkpoint_meta(rerun.artifacts[0]);
  CHECK(meta.at("epoch").get<int64_t>() == 2);
  CHECK(meta.at("config_hash").get<std::string>() ==
        pretrain_hash(cfg2, "jepa", "advdiff"));

  CHECK_THROWS_AS(resolve_pretrain(cfg, "rumba", "advdiff"), Error);

  CHECK(resolve_pretrain(cfg, "jepa", "advdiff").per_token_vicreg);
  CHECK_FALSE(resolve_pretrain(cfg, "jepa", "grayscott").per_token_vicreg);
  CHECK_FALSE(resolve_pretrain(cfg, "jepa", "shearvort").per_token_vicreg);
  ExperimentConfig forced = cfg;
  forced.vicreg_stats = "per_token";
  CHECK(resolve_pretrain(forced, "jepa", "shearvort").per_token_vicreg);
  forced.vicreg_stats = "pooled";
  CHECK_FALSE(resolve_pretrain(forced, "jepa", "advdiff").per_token_vicreg);
  forced.vicreg_stats = "sideways";
  CHECK_THROWS_AS(forced.validate(), Error);

  std::ofstream(data_dir(cfg, "advdiff") + "/manifest.json") << "garbage";
  bool format_error = false;
  try {
    cmd_pretrain_one(cfg2, ledger, "jepa", "advdiff", true);
  } catch (const Error& e) {
    format_error = e.code() == ErrCode::format;
  }
  CHECK(format_error);
}

TEST_CASE("worker processes fill the grid under a shared ledger") {
  TempDir dir;
  ExperimentConfig cfg = micro_config(dir.str() + "/run");
  cfg.methods = {"jepa", "mae"};
  RunLedger ledger(ledger_path(cfg));
  cmd_generate(cfg, ledger, false);

  auto outcomes = cmd_pretrain(cfg, ledger, false, 2);
  REQUIRE(outcomes.size() == 2);
  CHECK(std::filesystem::exists(checkpoint_path(cfg, "jepa", "advdiff")));
  CHECK(std::filesystem::exists(checkpoint_path(cfg, "mae", "advdiff")));

  RunLedger check(ledger_path(cfg));
  CHECK(check.completed(pretrain_stage("jepa", "advdiff"),
                        pretrain_hash(cfg, "jepa", "advdiff")));
  CHECK(check.completed(pretrain_stage("mae", "advdiff"),
                        pretrain_hash(cfg, "mae", "advdiff")));
}

TEST_CASE("probe cells produce fragments and the merged results table") {
  TempDir dir;
  ExperimentConfig cfg = micro_config(dir.str() + "/run");
  RunLedger ledger(ledger_path(cfg));
  cmd_generate(cfg, ledger, false);

  // checkpoint not there yet: the error names the pretrain stage
  bool named = false;
  try {
    cmd_probe_one(cfg, ledger, "jepa", "advdiff", false);
  } catch (const Error& e) {
    named = e.code() == ErrCode::missing &&
            std::string(e.what()).find("pretrain:jepa:advdiff") !=
                std::string::npos;
  }
  CHECK(named);

  cmd_pretrain(cfg, ledger, false);
  auto outcomes = cmd_probe(cfg, ledger, false);
  REQUIRE(outcomes.size() == 2);  // one cell + the merge
  CHECK(outcomes[0].ran);
  CHECK(std::filesystem::exists(results_csv_path(cfg)));
  CHECK(std::filesystem::exists(results_json_path(cfg)));

  auto rows = read_results_csv(results_csv_path(cfg));
  REQUIRE(rows.size() == 1);  // 1 method x 1 system x 1 fraction x 1 seed
  CHECK(rows[0].method == "jepa");
  CHECK(rows[0].system == "advdiff");
  CHECK(rows[0].fraction == 1.0);
  CHECK(std::isfinite(rows[0].avg_mse));

  auto cached = cmd_probe(cfg, ledger, false);
  CHECK_FALSE(cached[0].ran);
  auto rows2 = read_results_csv(results_csv_path(cfg));
  CHECK(rows2.size() == 1);  // merge stays deduplicated

  auto paths = cmd_report(cfg);
  REQUIRE(paths.size() == 3);
  for (const auto& p : paths) CHECK(std::filesystem::exists(p));

  // report regeneration is pure: models and data can disappear
  std::filesystem::remove_all(dir.str() + "/run/models");
  std::filesystem::remove_all(dir.str() + "/run/data");
  auto paths2 = cmd_report(cfg);
  CHECK(paths2 == paths);

  std::ifstream md(paths[0]);
  std::string text((std::istreambuf_iterator<char>(md)),
                   std::istreambuf_iterator<char>());
  CHECK(text.find("standardized targets") != std::string::npos);
  CHECK(text.find("jepa") != std::string::npos);
}

TEST_CASE("report regeneration requires the results table") {
  TempDir dir;
  ExperimentConfig cfg = micro_config(dir.str() + "/run");
  CHECK_THROWS_AS(cmd_report(cfg), Error);
}

TEST_CASE("result merging detects contradictory duplicate rows") {
  TempDir dir;
  ExperimentConfig cfg = micro_config(dir.str() + "/run");
  cfg.methods = {"jepa", "mae"};

  std::filesystem::create_directories(
      std::filesystem::path(fragment_path(cfg, "jepa", "advdiff"))
          .parent_path());
  append_results_csv(fragment_path(cfg, "jepa", "advdiff"),
                     {make_row("jepa", "advdiff", 1.0, 1, 0.5)});
  append_results_csv(fragment_path(cfg, "mae", "advdiff"),
                     {make_row("mae", "advdiff", 1.0, 1, 0.7),
                      make_row("jepa", "advdiff", 1.0, 1, 0.5)});

  // duplicate with identical values collapses to one row
  merge_results(cfg);
  auto rows = read_results_csv(results_csv_path(cfg));
  CHECK(rows.size() == 2);

  std::filesystem::remove(fragment_path(cfg, "mae", "advdiff"));
  append_results_csv(fragment_path(cfg, "mae", "advdiff"),
                     {make_row("mae", "advdiff", 1.0, 1, 0.7),
                      make_row("jepa", "advdiff", 1.0, 1, 0.9)});
  bool conflict = false;
  try {
    merge_results(cfg);
  } catch (const Error& e) {
    conflict = e.code() == ErrCode::state;
  }
  CHECK(conflict);
}

TEST_CASE("trend summary computes medians, wins, and monotonicity flags") {
  std::vector<EvalReport> rows;
  // jepa beats mae on s1/s2, loses on s3; mae rises at fraction 1.0 on s3
  for (uint64_t seed : {1, 2, 3}) {
    double bump = 0.01 * static_cast<double>(seed);
    for (double f : {0.1, 0.5, 1.0}) {
      rows.push_back(make_row("jepa", "s1", f, seed, 0.9 - 0.2 * f + bump));
      rows.push_back(make_row("jepa", "s2", f, seed, 0.8 - 0.1 * f + bump));
      rows.push_back(make_row("jepa", "s3", f, seed, 1.2 - 0.1 * f + bump));
      rows.push_back(make_row("mae", "s1", f, seed, 1.0 - 0.1 * f + bump));
      rows.push_back(make_row("mae", "s2", f, seed, 0.9 - 0.1 * f + bump));
      rows.push_back(make_row("mae", "s3", f, seed,
                              f == 1.0 ? 0.9 + bump : 0.45 + bump));
    }
  }
  TrendSummary s = summarize_trends(rows, 0.02);

  CHECK(s.method_system.at("jepa").at("s1") == Catch::Approx(0.72));
  CHECK(s.method_system.at("mae").at("s1") == Catch::Approx(0.92));
  CHECK(s.jepa_wins == std::vector<std::string>{"s1", "s2"});
  CHECK(s.reversals == std::vector<std::string>{"s3"});

  // mae median across systems rises from fraction 0.5 to 1.0 beyond 0.02
  REQUIRE(s.monotonicity_flags.size() == 1);
  CHECK(s.monotonicity_flags[0].find("mae") == 0);

  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(median({}), Error);
}

TEST_CASE("selftest reports an injected gradient bug by op name") {
  SelftestOptions opt;
  opt.inject_bug = true;
  opt.oracle_instances = 3;
  auto checks = run_selftest(opt);
  int failures = 0;
  std::string failing;
  for (const auto& c : checks) {
    if (!c.ok) {
      ++failures;
      failing = c.name;
    }
  }
  CHECK(failures == 1);
  CHECK(failing == "gradcheck[conv3d]");
}
