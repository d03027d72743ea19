#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "dynrep/eval/probe_eval.hpp"

using namespace dynrep;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("dynrep_eval_" + std::to_string(Catch::rngSeed()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

// Small advdiff dataset plus a one-epoch pretrained encoder checkpoint.
struct EvalSetup {
  TempDir dir;
  DatasetManifest manifest;
  PretrainConfig pcfg;
  std::string ckpt;

  explicit EvalSetup(const std::string& method = "jepa") {
    SystemSpec spec = default_spec("advdiff");
    spec.H = spec.W = 16;
    spec.T = 12;
    DatasetCounts counts;
    counts.pretrain = 6;
    counts.labeled = 60;
    manifest = build_dataset(spec, counts, dir.str(), 11);

    pcfg.method = method;
    pcfg.epochs = 1;
    pcfg.batch = 4;
    pcfg.encoder.in_channels = 1;
    pcfg.encoder.context_frames = 4;
    pcfg.encoder.widths = {8, 16};
    pcfg.encoder.downsample = 4;
    pcfg.encoder.embed_dim = 16;
    pcfg.predictor.embed_dim = 16;
    pcfg.predictor.depth = 1;
    pcfg.mae.in_channels = 1;
    pcfg.mae.frames = 4;
    pcfg.mae.height = 16;
    pcfg.mae.width = 16;
    pcfg.mae.enc_dim = 32;
    pcfg.mae.enc_depth = 1;
    pcfg.mae.dec_dim = 16;
    pcfg.mae.dec_depth = 1;
    pcfg.mae.mask_ratio = 0.5;
    pcfg.seed = 4;
    ckpt =
        pretrain(manifest, dir.str(), pcfg, dir.str() + "/run").checkpoint;
  }

  ProbeTrainConfig probe_cfg() const {
    ProbeTrainConfig cfg;
    cfg.epochs = 25;
    cfg.batch = 16;
    cfg.probe_dim = 32;
    cfg.windows_per_traj = 2;
    return cfg;
  }
};

}  // namespace

TEST_CASE("probe task standardization round-trips and is train-split based") {
  EvalSetup es;
  ProbeTask task = make_probe_task(es.manifest);
  CHECK(task.system == "advdiff");
  CHECK(task.param_names[0] == "velocity");
  CHECK(task.param_names[1] == "kappa");
  CHECK_FALSE(task.log_transform[0]);
  CHECK(task.log_transform[1]);  // kappa is log-sampled

  // train-split targets standardize to mean 0, population variance 1
  auto train = es.manifest.split_entries("train");
  std::array<double, 2> sum{}, sumsq{};
  for (const auto* e : train) {
    auto z = standardize_targets(
        task, {e->params[0].second, e->params[1].second});
    for (size_t j = 0; j < 2; ++j) {
      sum[j] += z[j];
      sumsq[j] += z[j] * z[j];
    }
  }
  double n = static_cast<double>(train.size());
  for (size_t j = 0; j < 2; ++j) {
    CHECK(std::abs(sum[j] / n) < 1e-6);
    CHECK(std::abs(sumsq[j] / n - 1.0) < 1e-6);
  }

  // the train mean maps to zero; round-trip is tight
  std::array<double, 2> at_mean{task.mean[0], std::exp(task.mean[1])};
  auto z0 = standardize_targets(task, at_mean);
  CHECK(std::abs(z0[0]) < 1e-12);
  CHECK(std::abs(z0[1]) < 1e-12);
  std::array<double, 2> raw{0.63, 0.0041};
  auto back = destandardize_targets(task, standardize_targets(task, raw));
  CHECK(std::abs(back[0] - raw[0]) < 1e-12);
  CHECK(std::abs(back[1] - raw[1]) < 1e-12);

  ProbeTask broken = task;
  broken.std[0] = 0.0;
  CHECK_THROWS_AS(standardize_targets(broken, raw), Error);
}

TEST_CASE("probe task rejects constant parameters") {
  TempDir dir;
  SystemSpec spec = default_spec("advdiff");
  spec.H = spec.W = 16;
  spec.T = 6;
  spec.param_ranges[0] = {"velocity", 0.5, 0.5, false};  // degenerate
  DatasetCounts counts;
  counts.pretrain = 1;
  counts.labeled = 6;
  DatasetManifest m = build_dataset(spec, counts, dir.str(), 2);
  CHECK_THROWS_AS(make_probe_task(m), Error);
}

TEST_CASE("fraction subsets are nested and seeded") {
  EvalSetup es;
  auto tenth = fraction_subset(es.manifest, 0.1, 3);
  auto half = fraction_subset(es.manifest, 0.5, 3);
  auto full = fraction_subset(es.manifest, 1.0, 3);
  CHECK(tenth.size() == 4);  // 36 train trajectories
  CHECK(half.size() == 18);
  CHECK(full.size() == 36);

  std::set<std::string> half_files, full_files;
  for (const auto* e : half) half_files.insert(e->file);
  for (const auto* e : full) full_files.insert(e->file);
  for (const auto* e : tenth) CHECK(half_files.count(e->file) == 1);
  for (const auto* e : half) CHECK(full_files.count(e->file) == 1);

  auto again = fraction_subset(es.manifest, 0.5, 3);
  for (size_t i = 0; i < half.size(); ++i)
    CHECK(half[i]->file == again[i]->file);
  auto other = fraction_subset(es.manifest, 0.5, 4);
  bool same_order = true;
  for (size_t i = 0; i < half.size(); ++i)
    same_order = same_order && half[i]->file == other[i]->file;
  CHECK_FALSE(same_order);

  CHECK_THROWS_AS(fraction_subset(es.manifest, 0.0, 1), Error);
  CHECK_THROWS_AS(fraction_subset(es.manifest, 1.5, 1), Error);
  CHECK_THROWS_AS(fraction_subset(es.manifest, 0.001, 1), Error);
}

TEST_CASE("token encoders load from checkpoints for both methods") {
  EvalSetup jepa_setup("jepa");
  TokenEncoder te = load_token_encoder(jepa_setup.ckpt);
  CHECK(te.method == "jepa");
  CHECK(te.token_dim() == 16);
  CHECK(te.frames() == 4);

  Rng rng(2);
  std::vector<double> cd(2 * 1 * 4 * 16 * 16);
  for (auto& v : cd) v = rng.normal();
  Tensor clip = Tensor::from({2, 1, 4, 16, 16}, cd);
  Tensor tokens = te.tokens(clip);
  REQUIRE(tokens.shape() == Shape({2, 16, 16}));

  TokenEncoder te2 = load_token_encoder(jepa_setup.ckpt);
  Tensor tokens2 = te2.tokens(clip);
  for (size_t i = 0; i < tokens.data().size(); ++i)
    REQUIRE(tokens.data()[i] == tokens2.data()[i]);

  EvalSetup mae_setup("mae");
  TokenEncoder tm = load_token_encoder(mae_setup.ckpt);
  CHECK(tm.method == "mae");
  CHECK(tm.token_dim() == 32);
  Tensor mtokens = tm.tokens(clip);
  REQUIRE(mtokens.shape() == Shape({2, 32, 32}));

  CHECK_THROWS_AS(load_token_encoder(jepa_setup.dir.str() + "/nope.ckpt"),
                  Error);
}

TEST_CASE("train_probe fits without touching the encoder") {
  EvalSetup es;
  TokenEncoder te = load_token_encoder(es.ckpt);
  ProbeTask task = make_probe_task(es.manifest);

  std::vector<std::vector<double>> frozen;
  for (auto& p : te.params()) frozen.push_back(p.tensor.data());

  ProbeRun run =
      train_probe(te, task, es.manifest, es.dir.str(), 1.0, es.probe_cfg(), 5);

  auto after = te.params();
  for (size_t i = 0; i < after.size(); ++i)
    REQUIRE(after[i].tensor.data() == frozen[i]);

  REQUIRE(run.train_curve.size() == 25);
  CHECK(run.train_curve.back() < 1.0);
  CHECK(run.best_epoch >= 0);
  double min_val = *std::min_element(run.val_curve.begin(),
                                     run.val_curve.end());
  CHECK(run.best_val_mse == min_val);
  CHECK(run.val_curve[static_cast<size_t>(run.best_epoch)] == min_val);
  CHECK(run.train_files.size() == 36);

  CHECK_THROWS_AS(
      train_probe(te, task, es.manifest, es.dir.str(), 0.001, es.probe_cfg(), 5),
      Error);
}

TEST_CASE("probe training and evaluation are deterministic per seed") {
  EvalSetup es;
  TokenEncoder te = load_token_encoder(es.ckpt);
  ProbeTask task = make_probe_task(es.manifest);
  ProbeTrainConfig cfg = es.probe_cfg();
  cfg.epochs = 6;

  ProbeRun a = train_probe(te, task, es.manifest, es.dir.str(), 1.0, cfg, 9);
  ProbeRun b = train_probe(te, task, es.manifest, es.dir.str(), 1.0, cfg, 9);
  REQUIRE(a.val_curve == b.val_curve);
  REQUIRE(a.train_curve == b.train_curve);

  EvalReport ra = evaluate_mse(te, a.probe, task, es.manifest, es.dir.str(),
                               "test", cfg.windows_per_traj, 9);
  EvalReport rb = evaluate_mse(te, b.probe, task, es.manifest, es.dir.str(),
                               "test", cfg.windows_per_traj, 9);
  CHECK(ra.param_mse[0] == rb.param_mse[0]);
  CHECK(ra.param_mse[1] == rb.param_mse[1]);
  CHECK(ra.avg_mse == rb.avg_mse);

  ProbeRun c = train_probe(te, task, es.manifest, es.dir.str(), 1.0, cfg, 10);
  CHECK(a.val_curve != c.val_curve);
}

TEST_CASE("evaluate_mse reports chance-level for untrained probes") {
  EvalSetup es;
  TokenEncoder te = load_token_encoder(es.ckpt);
  ProbeTask task = make_probe_task(es.manifest);

  // mean-prediction baseline: standardized test targets against zero
  auto test_entries = es.manifest.split_entries("test");
  REQUIRE(test_entries.size() == 12);
  double baseline = 0.0;
  for (const auto* e : test_entries) {
    auto z = standardize_targets(task,
                                 {e->params[0].second, e->params[1].second});
    baseline += (z[0] * z[0] + z[1] * z[1]) / 2.0 /
                static_cast<double>(test_entries.size());
  }
  CHECK(baseline > 0.5);
  CHECK(baseline < 2.0);

  ProbeConfig pc;
  pc.dim = 32;
  pc.token_dim = te.token_dim();
  Rng rng(14);
  AttentiveProbe untrained(pc, rng);
  EvalReport r = evaluate_mse(te, untrained, task, es.manifest, es.dir.str(),
                              "test", 2, 3);
  CHECK(r.avg_mse > 0.5);
  CHECK(r.avg_mse < 2.0);
  CHECK(r.avg_mse == 0.5 * (r.param_mse[0] + r.param_mse[1]));
  CHECK(r.method == "jepa");
  CHECK(r.system == "advdiff");

  CHECK_THROWS_AS(evaluate_mse(te, untrained, task, es.manifest, es.dir.str(),
                               "nosuch", 2, 3),
                  Error);
}

TEST_CASE("data_fraction_grid produces one deterministic report per cell") {
  EvalSetup es;
  TokenEncoder te = load_token_encoder(es.ckpt);
  ProbeTask task = make_probe_task(es.manifest);
  ProbeTrainConfig cfg = es.probe_cfg();
  cfg.epochs = 4;

  auto reports = data_fraction_grid(te, task, es.manifest, es.dir.str(),
                                    {0.5, 1.0}, {1, 2}, cfg);
  REQUIRE(reports.size() == 4);
  std::set<std::pair<double, uint64_t>> cells;
  for (const auto& r : reports) {
    cells.insert({r.fraction, r.seed});
    CHECK(r.epochs == 4);
    CHECK(std::isfinite(r.avg_mse));
    CHECK(r.avg_mse == 0.5 * (r.param_mse[0] + r.param_mse[1]));
  }
  CHECK(cells.size() == 4);

  auto again = data_fraction_grid(te, task, es.manifest, es.dir.str(),
                                  {0.5, 1.0}, {1, 2}, cfg);
  for (size_t i = 0; i < reports.size(); ++i)
    CHECK(reports[i].avg_mse == again[i].avg_mse);
}

TEST_CASE("data_fraction_grid matches independently trained runs") {
  EvalSetup es;
  TokenEncoder te = load_token_encoder(es.ckpt);
  ProbeTask task = make_probe_task(es.manifest);
  ProbeTrainConfig cfg = es.probe_cfg();
  cfg.epochs = 3;

  auto reports = data_fraction_grid(te, task, es.manifest, es.dir.str(),
                                    {0.25, 0.5, 1.0}, {3}, cfg);
  REQUIRE(reports.size() == 3);
  for (const auto& r : reports) {
    ProbeRun run =
        train_probe(te, task, es.manifest, es.dir.str(), r.fraction, cfg, 3);
    EvalReport solo = evaluate_mse(te, run.probe, task, es.manifest,
                                   es.dir.str(), "test",
                                   cfg.windows_per_traj, 3);
    CHECK(r.param_mse[0] == solo.param_mse[0]);
    CHECK(r.param_mse[1] == solo.param_mse[1]);
  }
}

TEST_CASE("results tables round-trip through CSV and mirror to JSON") {
  TempDir dir;
  std::vector<EvalReport> rows(2);
  rows[0].method = "jepa";
  rows[0].system = "advdiff";
  rows[0].fraction = 0.1;
  rows[0].seed = 7;
  rows[0].param_mse = {0.123456789012345, 0.5};
  rows[0].avg_mse = 0.5 * (rows[0].param_mse[0] + rows[0].param_mse[1]);
  rows[1].method = "mae";
  rows[1].system = "shearvort";
  rows[1].fraction = 1.0;
  rows[1].seed = 8;
  rows[1].param_mse = {1.0 / 3.0, 2.0 / 3.0};
  rows[1].avg_mse = 0.5;

  std::string csv = dir.str() + "/results.csv";
  append_results_csv(csv, {rows[0]});
  append_results_csv(csv, {rows[1]});  // appends without a second header
  auto back = read_results_csv(csv);
  REQUIRE(back.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back[i].method == rows[i].method);
    CHECK(back[i].system == rows[i].system);
    CHECK(back[i].fraction == rows[i].fraction);
    CHECK(back[i].seed == rows[i].seed);
    CHECK(back[i].param_mse[0] == rows[i].param_mse[0]);
    CHECK(back[i].param_mse[1] == rows[i].param_mse[1]);
    CHECK(back[i].avg_mse == rows[i].avg_mse);
  }

  std::string json_path = dir.str() + "/results.json";
  write_results_json(json_path, rows);
  std::ifstream f(json_path);
  nlohmann::json j = nlohmann::json::parse(f);
  CHECK(j["convention"] == "mse_on_standardized_targets");
  REQUIRE(j["rows"].size() == 2);
  CHECK(j["rows"][1]["avg_mse"].get<double>() == 0.5);

  std::ofstream bad(dir.str() + "/bad.csv");
  bad << "method,system,fraction,seed,param1_mse,param2_mse,avg_mse\n";
  bad << "jepa,advdiff,not_a_number,1,0.1,0.2,0.15\n";
  bad.close();
  CHECK_THROWS_AS(read_results_csv(dir.str() + "/bad.csv"), Error);
  CHECK_THROWS_AS(read_results_csv(dir.str() + "/missing.csv"), Error);
}
