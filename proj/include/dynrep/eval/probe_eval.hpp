#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dynrep/core/autodiff.hpp"
#include "dynrep/nn/checkpoint.hpp"
#include "dynrep/nn/probe.hpp"
#include "dynrep/ssl/pretrain.hpp"

namespace dynrep {

// Frozen pretrained encoder presented as a clip -> token-sequence map,
// hiding the architectural difference between the two methods.
struct TokenEncoder {
  std::string method;  // jepa | mae
  Encoder encoder;
  Mae mae;

  int64_t token_dim() const {
    return method == "jepa" ? encoder.cfg.embed_dim : mae.cfg.enc_dim;
  }
  int64_t frames() const {
    return method == "jepa" ? encoder.cfg.context_frames : mae.cfg.frames;
  }
  int64_t channels() const {
    return method == "jepa" ? encoder.cfg.in_channels : mae.cfg.in_channels;
  }

  // [N, C, k, H, W] -> [N, S, token_dim], no gradient graph
  Tensor tokens(const Tensor& clip) const {
    NoGradGuard guard;
    if (method == "jepa") {
      Tensor grid = encoder.forward(clip);
      const Shape& s = grid.shape();
      return reshape(grid, {s[0], s[1] * s[2], s[3]});
    }
    return mae.encode_all(clip);
  }

  std::vector<ParamRef> params() {
    return method == "jepa" ? encoder.params() : mae.params();
  }
};

inline TokenEncoder load_token_encoder(const std::string& ckpt_path) {
  nlohmann::json meta = read_checkpoint_meta(ckpt_path);
  TokenEncoder te;
  te.method = meta.value("method", "");
  Rng rng(0);  // initialization is immediately overwritten by the load
  if (te.method == "jepa") {
    EncoderConfig ec = meta.at("encoder").get<EncoderConfig>();
    te.encoder = Encoder(ec, rng);
    auto params = te.encoder.params();
    // the checkpoint also holds predictor weights; restore just the encoder
    PredictorConfig pc = meta.at("predictor").get<PredictorConfig>();
    Predictor pred(pc, rng);
    for (auto& p : pred.params()) params.push_back(std::move(p));
    load_checkpoint(ckpt_path, params);
  } else if (te.method == "mae") {
    MaeConfig mc = meta.at("mae").get<MaeConfig>();
    te.mae = Mae(mc, rng);
    auto params = te.mae.params();
    load_checkpoint(ckpt_path, params);
  } else {
    throw Error(ErrCode::format,
                "checkpoint at " + ckpt_path + " records no known method");
  }
  return te;
}

struct ProbeTask {
  std::string system;
  std::array<std::string, 2> param_names;
  std::array<bool, 2> log_transform{};
  std::array<double, 2> mean{}, std{};
};

// Standardization statistics come from the probe-train split only;
// log-sampled parameters are log-transformed before standardizing.
inline ProbeTask make_probe_task(const DatasetManifest& m) {
  ProbeTask task;
  task.system = m.system;
  for (size_t j = 0; j < 2; ++j) {
    task.param_names[j] = m.spec.param_ranges[j].name;
    task.log_transform[j] = m.spec.param_ranges[j].log_scale;
  }
  auto train = m.split_entries("train");
  if (train.empty())
    throw Error(ErrCode::value, "probe task: dataset has no train split");
  for (size_t j = 0; j < 2; ++j) {
    double sum = 0.0, sumsq = 0.0;
    for (const auto* e : train) {
      double v = e->params[j].second;
      if (task.log_transform[j]) v = std::log(v);
      sum += v;
      sumsq += v * v;
    }
    double n = static_cast<double>(train.size());
    task.mean[j] = sum / n;
    double var = sumsq / n - task.mean[j] * task.mean[j];
    task.std[j] = std::sqrt(std::max(var, 0.0));
    if (task.std[j] <= 0.0)
      throw Error(ErrCode::value,
                  "probe task: parameter '" + task.param_names[j] +
                      "' is constant on the train split (std = 0)");
  }
  return task;
}

inline std::array<double, 2> standardize_targets(
    const ProbeTask& task, const std::array<double, 2>& raw) {
  std::array<double, 2> z{};
  for (size_t j = 0; j < 2; ++j) {
    if (task.std[j] <= 0.0)
      throw Error(ErrCode::value, "standardize: std = 0 for parameter '" +
                                      task.param_names[j] + "'");
    double v = task.log_transform[j] ? std::log(raw[j]) : raw[j];
    z[j] = (v - task.mean[j]) / task.std[j];
  }
  return z;
}

inline std::array<double, 2> destandardize_targets(
    const ProbeTask& task, const std::array<double, 2>& z) {
  std::array<double, 2> raw{};
  for (size_t j = 0; j < 2; ++j) {
    double v = z[j] * task.std[j] + task.mean[j];
    raw[j] = task.log_transform[j] ? std::exp(v) : v;
  }
  return raw;
}

struct ProbeTrainConfig {
  int64_t epochs = 100;
  int64_t batch = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double warmup_frac = 0.05;
  int64_t num_queries = 1;
  int64_t probe_dim = 64;
  int64_t windows_per_traj = 4;

  void validate() const {
    if (epochs < 1 || batch < 1 || windows_per_traj < 1)
      throw Error(ErrCode::value, "probe config: bad epochs/batch/windows");
    if (lr <= 0.0) throw Error(ErrCode::value, "probe config: lr must be > 0");
  }
};

struct EvalReport {
  std::string method, system;
  double fraction = 1.0;
  uint64_t seed = 0;
  int64_t epochs = 0;
  std::array<double, 2> param_mse{};
  double avg_mse = 0.0;
};

namespace detail {

struct ProbeSamples {
  Tensor tokens;   // [num_traj * windows_per_traj, S, D]
  Tensor targets;  // [num_traj * windows_per_traj, 2] standardized
  std::vector<std::array<double, 2>> traj_targets;
  int64_t windows_per_traj = 0;
  int64_t num_traj = 0;
};

// Fixed per-(entry, seed) window offsets; tokens computed once since the
// encoder stays frozen throughout probe training. Clips are normalized with
// the manifest's pretrain-split statistics, matching pretraining.
inline ProbeSamples build_probe_samples(
    const TokenEncoder& te, const ProbeTask& task, const DatasetManifest& m,
    const std::vector<const ManifestEntry*>& entries, const std::string& dir,
    int64_t windows_per_traj, uint64_t seed) {
  if (entries.empty())
    throw Error(ErrCode::value, "probe samples: empty trajectory set");
  int64_t k = te.frames();
  std::vector<Tensor> clips;
  std::vector<double> target_rows;
  ProbeSamples out;
  out.windows_per_traj = windows_per_traj;
  out.num_traj = static_cast<int64_t>(entries.size());

  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& e = *entries[i];
    Trajectory traj = read_trajectory(dir + "/" + e.file);
    if (traj.T < k)
      throw Error(ErrCode::value,
                  "probe samples: trajectory " + e.file + " has " +
                      std::to_string(traj.T) + " frames, needs " +
                      std::to_string(k));
    std::array<double, 2> raw{e.params[0].second, e.params[1].second};
    std::array<double, 2> z = standardize_targets(task, raw);
    out.traj_targets.push_back(z);

    Rng rng = Rng(seed).fork(0x33D0 + static_cast<uint64_t>(i));
    for (int64_t w = 0; w < windows_per_traj; ++w) {
      int64_t offset = rng.uniform_int(0, traj.T - k + 1);
      clips.push_back(
          clip_tensor(traj, offset, k, m.channel_mean, m.channel_std));
      target_rows.push_back(z[0]);
      target_rows.push_back(z[1]);
    }
  }

  // encode in modest batches to bound peak memory
  std::vector<Tensor> token_chunks;
  for (size_t begin = 0; begin < clips.size(); begin += 32) {
    size_t end = std::min(clips.size(), begin + 32);
    std::vector<Tensor> chunk(clips.begin() + static_cast<int64_t>(begin),
                              clips.begin() + static_cast<int64_t>(end));
    token_chunks.push_back(
        te.tokens(chunk.size() == 1 ? chunk[0] : concat(chunk, 0)));
  }
  out.tokens = token_chunks.size() == 1 ? token_chunks[0]
                                        : concat(token_chunks, 0);
  out.targets = Tensor::from(
      {static_cast<int64_t>(clips.size()), 2}, std::move(target_rows));
  return out;
}

// Per-trajectory predictions = mean over the trajectory's windows; returns
// the report MSE fields on standardized targets.
inline std::array<double, 2> grouped_mse(const AttentiveProbe& probe,
                                         const ProbeSamples& s) {
  NoGradGuard guard;
  Tensor pred = probe.forward(s.tokens);  // [n_windows, 2]
  std::array<double, 2> mse{};
  for (int64_t t = 0; t < s.num_traj; ++t) {
    std::array<double, 2> avg{};
    for (int64_t w = 0; w < s.windows_per_traj; ++w) {
      size_t row = static_cast<size_t>(t * s.windows_per_traj + w);
      avg[0] += pred.data()[row * 2] / static_cast<double>(s.windows_per_traj);
      avg[1] +=
          pred.data()[row * 2 + 1] / static_cast<double>(s.windows_per_traj);
    }
    for (size_t j = 0; j < 2; ++j) {
      double d = avg[j] - s.traj_targets[static_cast<size_t>(t)][j];
      mse[j] += d * d / static_cast<double>(s.num_traj);
    }
  }
  return mse;
}

// First num_traj trajectories of a larger sample set. Rows align because
// window draws are keyed by position in the trajectory list, not by entry.
inline ProbeSamples head_probe_samples(const ProbeSamples& full,
                                       int64_t num_traj) {
  if (num_traj < 1 || num_traj > full.num_traj)
    throw Error(ErrCode::value, "probe samples: bad head size " +
                                    std::to_string(num_traj) + " of " +
                                    std::to_string(full.num_traj));
  ProbeSamples out;
  out.windows_per_traj = full.windows_per_traj;
  out.num_traj = num_traj;
  int64_t rows = num_traj * full.windows_per_traj;
  std::vector<int64_t> idx(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) idx[static_cast<size_t>(i)] = i;
  out.tokens = index_select(full.tokens, 0, idx);
  out.targets = index_select(full.targets, 0, idx);
  out.traj_targets.assign(full.traj_targets.begin(),
                          full.traj_targets.begin() + num_traj);
  return out;
}

}  // namespace detail

struct ProbeRun {
  AttentiveProbe probe;  // best-validation parameters restored
  double best_val_mse = 0.0;
  int64_t best_epoch = -1;
  std::vector<double> train_curve, val_curve;  // per-epoch averaged MSE
  std::vector<std::string> train_files;        // subset audit trail
};

// Deterministic nested trajectory subsets: a seed fixes one permutation of
// the train split, and every fraction takes a prefix of it.
inline std::vector<const ManifestEntry*> fraction_subset(
    const DatasetManifest& m, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw Error(ErrCode::value, "fraction must be in (0, 1]");
  auto train = m.split_entries("train");
  int64_t count = static_cast<int64_t>(
      std::llround(fraction * static_cast<double>(train.size())));
  if (count < 1)
    throw Error(ErrCode::value,
                "fraction " + std::to_string(fraction) + " of " +
                    std::to_string(train.size()) +
                    " train trajectories selects none");
  Rng rng = Rng(seed).fork(0xF2AC);
  std::vector<int64_t> order = rng.permutation(static_cast<int64_t>(train.size()));
  std::vector<const ManifestEntry*> subset;
  for (int64_t i = 0; i < count; ++i)
    subset.push_back(train[static_cast<size_t>(order[static_cast<size_t>(i)])]);
  return subset;
}

namespace detail {

// Training loop over prebuilt sample tensors; constructing the samples is
// the caller's job, which lets the fraction grid reuse encodings.
inline ProbeRun train_probe_on(int64_t token_dim, const ProbeSamples& train_s,
                               const ProbeSamples& val_s,
                               const ProbeTrainConfig& cfg, uint64_t seed,
                               std::vector<std::string> train_files) {
  ProbeConfig pc;
  pc.num_queries = cfg.num_queries;
  pc.dim = cfg.probe_dim;
  pc.token_dim = token_dim;
  pc.out = 2;
  Rng init_rng = Rng(seed).fork(0x9B0E);
  ProbeRun run;
  run.probe = AttentiveProbe(pc, init_rng);
  run.train_files = std::move(train_files);

  auto params = run.probe.params();
  AdamW opt(cfg.weight_decay);
  int64_t n = train_s.tokens.shape()[0];
  int64_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  int64_t total_steps = cfg.epochs * steps_per_epoch;
  int64_t warmup =
      std::llround(cfg.warmup_frac * static_cast<double>(total_steps));

  std::vector<std::vector<double>> best;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng = Rng(seed).fork(0x0EC0 + static_cast<uint64_t>(epoch));
    std::vector<int64_t> order = order_rng.permutation(n);
    for (int64_t begin = 0; begin < n; begin += cfg.batch) {
      int64_t end = std::min(n, begin + cfg.batch);
      std::vector<int64_t> idx(order.begin() + begin, order.begin() + end);
      Tensor xb = index_select(train_s.tokens, 0, idx);
      Tensor yb = index_select(train_s.targets, 0, idx);
      zero_grads(params);
      Tensor loss = mse(run.probe.forward(xb), yb);
      if (!std::isfinite(loss.data()[0]))
        throw Error(ErrCode::numeric, "train_probe: non-finite loss");
      backward(loss);
      opt.step(params, cosine_lr(step, total_steps, cfg.lr, warmup));
      ++step;
    }

    std::array<double, 2> tr = detail::grouped_mse(run.probe, train_s);
    std::array<double, 2> va = detail::grouped_mse(run.probe, val_s);
    run.train_curve.push_back(0.5 * (tr[0] + tr[1]));
    run.val_curve.push_back(0.5 * (va[0] + va[1]));
    if (run.best_epoch < 0 || run.val_curve.back() < run.best_val_mse) {
      run.best_val_mse = run.val_curve.back();
      run.best_epoch = epoch;
      best.clear();
      for (auto& p : params) best.push_back(p.tensor.data());
    }
  }

  for (size_t i = 0; i < params.size(); ++i)
    params[i].tensor.mutable_data() = best[i];
  return run;
}

inline EvalReport evaluate_on(const std::string& method,
                              const AttentiveProbe& probe,
                              const ProbeTask& task, const ProbeSamples& s,
                              uint64_t seed) {
  EvalReport report;
  report.method = method;
  report.system = task.system;
  report.seed = seed;
  report.param_mse = grouped_mse(probe, s);
  report.avg_mse = 0.5 * (report.param_mse[0] + report.param_mse[1]);
  return report;
}

}  // namespace detail

inline ProbeRun train_probe(const TokenEncoder& te, const ProbeTask& task,
                            const DatasetManifest& m, const std::string& dir,
                            double fraction, const ProbeTrainConfig& cfg,
                            uint64_t seed) {
  cfg.validate();
  auto subset = fraction_subset(m, fraction, seed);
  auto val_entries = m.split_entries("val");
  if (val_entries.empty())
    throw Error(ErrCode::value, "train_probe: dataset has no val split");

  detail::ProbeSamples train_s = detail::build_probe_samples(
      te, task, m, subset, dir, cfg.windows_per_traj, seed);
  detail::ProbeSamples val_s = detail::build_probe_samples(
      te, task, m, val_entries, dir, cfg.windows_per_traj, seed + 1);
  std::vector<std::string> files;
  files.reserve(subset.size());
  for (const auto* e : subset) files.push_back(e->file);
  return detail::train_probe_on(te.token_dim(), train_s, val_s, cfg, seed,
                                std::move(files));
}

inline EvalReport evaluate_mse(const TokenEncoder& te,
                               const AttentiveProbe& probe,
                               const ProbeTask& task, const DatasetManifest& m,
                               const std::string& dir,
                               const std::string& split,
                               int64_t windows_per_traj, uint64_t seed) {
  auto entries = m.split_entries(split);
  if (entries.empty())
    throw Error(ErrCode::value,
                "evaluate_mse: split '" + split + "' is empty");
  detail::ProbeSamples s = detail::build_probe_samples(
      te, task, m, entries, dir, windows_per_traj, seed);
  return detail::evaluate_on(te.method, probe, task, s, seed);
}

inline std::vector<EvalReport> data_fraction_grid(
    const TokenEncoder& te, const ProbeTask& task, const DatasetManifest& m,
    const std::string& dir, const std::vector<double>& fractions,
    const std::vector<uint64_t>& seeds, const ProbeTrainConfig& cfg) {
  cfg.validate();
  if (fractions.empty())
    throw Error(ErrCode::value, "data_fraction_grid: no fractions given");
  auto val_entries = m.split_entries("val");
  if (val_entries.empty())
    throw Error(ErrCode::value,
                "data_fraction_grid: dataset has no val split");
  auto test_entries = m.split_entries("test");
  if (test_entries.empty())
    throw Error(ErrCode::value,
                "data_fraction_grid: dataset has no test split");
  double max_fraction = *std::max_element(fractions.begin(), fractions.end());

  std::vector<EvalReport> reports;
  for (uint64_t seed : seeds) {
    // Fractions are nested prefixes of one per-seed trajectory permutation
    // and windows are keyed by prefix position, so a single encoding pass at
    // the largest fraction covers every smaller one.
    auto subset = fraction_subset(m, max_fraction, seed);
    detail::ProbeSamples train_full = detail::build_probe_samples(
        te, task, m, subset, dir, cfg.windows_per_traj, seed);
    detail::ProbeSamples val_s = detail::build_probe_samples(
        te, task, m, val_entries, dir, cfg.windows_per_traj, seed + 1);
    detail::ProbeSamples test_s = detail::build_probe_samples(
        te, task, m, test_entries, dir, cfg.windows_per_traj, seed);

    for (double fraction : fractions) {
      auto part = fraction_subset(m, fraction, seed);
      int64_t count = static_cast<int64_t>(part.size());
      detail::ProbeSamples sliced;
      const detail::ProbeSamples* train_s = &train_full;
      if (count != train_full.num_traj) {
        sliced = detail::head_probe_samples(train_full, count);
        train_s = &sliced;
      }
      std::vector<std::string> files;
      files.reserve(part.size());
      for (const auto* e : part) files.push_back(e->file);
      ProbeRun run = detail::train_probe_on(te.token_dim(), *train_s, val_s,
                                            cfg, seed, std::move(files));
      EvalReport r = detail::evaluate_on(te.method, run.probe, task, test_s,
                                         seed);
      r.fraction = fraction;
      r.epochs = cfg.epochs;
      reports.push_back(std::move(r));
    }
  }
  return reports;
}

inline const char* kResultsHeader =
    "method,system,fraction,seed,param1_mse,param2_mse,avg_mse";

inline void append_results_csv(const std::string& path,
                               const std::vector<EvalReport>& rows,
                               const std::string& extra_comment = "") {
  bool fresh = !std::filesystem::exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw Error(ErrCode::io, "results: cannot write " + path);
  if (fresh) {
    f << "# MSE computed on standardized targets\n";
    if (!extra_comment.empty()) f << "# " << extra_comment << "\n";
    f << kResultsHeader << "\n";
  }
  char line[512];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line),
                  "%s,%s,%.17g,%llu,%.17g,%.17g,%.17g\n", r.method.c_str(),
                  r.system.c_str(), r.fraction,
                  static_cast<unsigned long long>(r.seed), r.param_mse[0],
                  r.param_mse[1], r.avg_mse);
    f << line;
  }
}

inline void write_results_json(const std::string& path,
                               const std::vector<EvalReport>& rows) {
  nlohmann::json j;
  j["convention"] = "mse_on_standardized_targets";
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"method", r.method},
                         {"system", r.system},
                         {"fraction", r.fraction},
                         {"seed", r.seed},
                         {"param1_mse", r.param_mse[0]},
                         {"param2_mse", r.param_mse[1]},
                         {"avg_mse", r.avg_mse}});
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrCode::io, "results: cannot write " + path);
  f << j.dump(2) << "\n";
}

inline std::vector<EvalReport> read_results_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrCode::missing, "results: cannot open " + path);
  std::vector<EvalReport> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("method,", 0) == 0)
      continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw Error(ErrCode::format,
                  "results: malformed row in " + path + ": " + line);
    EvalReport r;
    r.method = fields[0];
    r.system = fields[1];
    try {
      r.fraction = std::stod(fields[2]);
      r.seed = std::stoull(fields[3]);
      r.param_mse[0] = std::stod(fields[4]);
      r.param_mse[1] = std::stod(fields[5]);
      r.avg_mse = std::stod(fields[6]);
    } catch (const std::exception&) {
      throw Error(ErrCode::format,
                  "results: non-numeric row in " + path + ": " + line);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeTrainConfig, epochs,
                                                batch, lr, weight_decay,
                                                warmup_frac, num_queries,
                                                probe_dim, windows_per_traj)

}  // namespace dynrep
