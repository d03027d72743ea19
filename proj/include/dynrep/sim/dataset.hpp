#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/core/tensor.hpp"
#include "dynrep/sim/systems.hpp"

namespace dynrep {

// Trajectory file: a 64-byte header block (magic, version, JSON length),
// a JSON blob (shape, channel names, params, seed, frame dt), then the raw
// field data as little-endian IEEE-754 32-bit floats, row-major [T,C,H,W].
inline constexpr char kTrajMagic[16] = "DYNREP-TRAJ";
inline constexpr uint32_t kTrajVersion = 1;

inline void write_trajectory(const std::string& path, const Trajectory& traj) {
  nlohmann::json meta;
  meta["system"] = traj.system;
  meta["shape"] = {traj.T, traj.C, traj.H, traj.W};
  meta["channels"] = traj.channels;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, value] : traj.params) params[name] = value;
  meta["params"] = params;
  meta["param_order"] = nlohmann::json::array();
  for (const auto& [name, value] : traj.params) meta["param_order"].push_back(name);
  meta["seed"] = traj.seed;
  meta["frame_dt"] = traj.frame_dt;
  std::string blob = meta.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrCode::io, "trajectory: cannot write " + path);
  char header[64] = {};
  std::memcpy(header, kTrajMagic, sizeof(kTrajMagic));
  uint32_t version = kTrajVersion;
  std::memcpy(header + 16, &version, sizeof(version));
  uint64_t blob_len = blob.size();
  std::memcpy(header + 24, &blob_len, sizeof(blob_len));
  f.write(header, sizeof(header));
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::vector<float> payload(traj.frames.size());
  for (size_t i = 0; i < traj.frames.size(); ++i)
    payload[i] = static_cast<float>(traj.frames[i]);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw Error(ErrCode::io, "trajectory: write failed for " + path);
}

inline Trajectory read_trajectory(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrCode::missing, "trajectory: cannot open " + path);
  char header[64];
  f.read(header, sizeof(header));
  if (!f || std::memcmp(header, kTrajMagic, sizeof(kTrajMagic)) != 0)
    throw Error(ErrCode::format, "trajectory: bad magic in " + path);
  uint32_t version = 0;
  std::memcpy(&version, header + 16, sizeof(version));
  if (version != kTrajVersion)
    throw Error(ErrCode::format, "trajectory: unsupported version " +
                                     std::to_string(version) + " in " + path);
  uint64_t blob_len = 0;
  std::memcpy(&blob_len, header + 24, sizeof(blob_len));
  std::string blob(blob_len, '\0');
  f.read(blob.data(), static_cast<std::streamsize>(blob_len));
  if (!f) throw Error(ErrCode::format, "trajectory: truncated header in " + path);
  nlohmann::json meta = nlohmann::json::parse(blob, nullptr, false);
  if (meta.is_discarded())
    throw Error(ErrCode::format, "trajectory: header is not valid JSON in " + path);

  Trajectory traj;
  try {
    traj.system = meta.at("system").get<std::string>();
    auto shape = meta.at("shape");
    traj.T = shape.at(0).get<int64_t>();
    traj.C = shape.at(1).get<int64_t>();
    traj.H = shape.at(2).get<int64_t>();
    traj.W = shape.at(3).get<int64_t>();
    traj.channels = meta.at("channels").get<std::vector<std::string>>();
    for (const auto& name : meta.at("param_order"))
      traj.params.emplace_back(name.get<std::string>(),
                               meta.at("params").at(name.get<std::string>()).get<double>());
    traj.seed = meta.at("seed").get<uint64_t>();
    traj.frame_dt = meta.at("frame_dt").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrCode::format,
                "trajectory: header missing fields in " + path + ": " + e.what());
  }
  if (traj.T < 1 || traj.C < 1 || traj.H < 1 || traj.W < 1)
    throw Error(ErrCode::format, "trajectory: degenerate shape in " + path);

  size_t count = static_cast<size_t>(traj.T * traj.C * traj.H * traj.W);
  std::vector<float> payload(count);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(count * sizeof(float)));
  if (!f)
    throw Error(ErrCode::format,
                "trajectory: payload shorter than header shape in " + path);
  traj.frames.resize(count);
  for (size_t i = 0; i < count; ++i)
    traj.frames[i] = static_cast<double>(payload[i]);
  return traj;
}

struct ManifestEntry {
  std::string file;
  std::vector<std::pair<std::string, double>> params;
  uint64_t seed = 0;
  std::string split;  // pretrain | train | val | test
};

struct DatasetManifest {
  std::string system;
  SystemSpec spec;
  std::vector<ManifestEntry> entries;
  std::vector<double> channel_mean, channel_std;  // from the pretrain split

  std::vector<const ManifestEntry*> split_entries(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(&e);
    return out;
  }
};

inline nlohmann::json spec_to_json(const SystemSpec& s) {
  nlohmann::json ranges = nlohmann::json::array();
  for (const auto& r : s.param_ranges)
    ranges.push_back({{"name", r.name}, {"lo", r.lo}, {"hi", r.hi},
                      {"log_scale", r.log_scale}});
  return {{"system", s.system}, {"H", s.H},         {"W", s.W},
          {"T", s.T},           {"dt", s.dt},       {"save_every", s.save_every},
          {"param_ranges", ranges}, {"init", s.init},
          {"init_amplitude", s.init_amplitude}};
}

inline SystemSpec spec_from_json(const nlohmann::json& j) {
  SystemSpec s;
  s.system = j.at("system").get<std::string>();
  s.H = j.at("H").get<int64_t>();
  s.W = j.at("W").get<int64_t>();
  s.T = j.at("T").get<int64_t>();
  s.dt = j.at("dt").get<double>();
  s.save_every = j.at("save_every").get<int64_t>();
  auto ranges = j.at("param_ranges");
  for (size_t i = 0; i < 2; ++i) {
    s.param_ranges[i].name = ranges.at(i).at("name").get<std::string>();
    s.param_ranges[i].lo = ranges.at(i).at("lo").get<double>();
    s.param_ranges[i].hi = ranges.at(i).at("hi").get<double>();
    s.param_ranges[i].log_scale = ranges.at(i).at("log_scale").get<bool>();
  }
  s.init = j.value("init", "random");
  s.init_amplitude = j.value("init_amplitude", 1.0);
  return s;
}

inline void write_manifest(const std::string& dir, const DatasetManifest& m) {
  nlohmann::json j;
  j["system"] = m.system;
  j["spec"] = spec_to_json(m.spec);
  j["normalization"] = {{"mean", m.channel_mean}, {"std", m.channel_std}};
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, value] : e.params) params[name] = value;
    entries.push_back({{"file", e.file},
                       {"params", params},
                       {"seed", e.seed},
                       {"split", e.split}});
  }
  j["entries"] = std::move(entries);
  std::ofstream f(dir + "/manifest.json", std::ios::trunc);
  if (!f) throw Error(ErrCode::io, "manifest: cannot write " + dir);
  f << j.dump(2) << "\n";
}

inline DatasetManifest read_manifest(const std::string& dir) {
  std::string path = dir + "/manifest.json";
  std::ifstream f(path);
  if (!f) throw Error(ErrCode::missing, "manifest: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded())
    throw Error(ErrCode::format, "manifest: invalid JSON in " + path);
  DatasetManifest m;
  try {
    m.system = j.at("system").get<std::string>();
    m.spec = spec_from_json(j.at("spec"));
    m.channel_mean = j.at("normalization").at("mean").get<std::vector<double>>();
    m.channel_std = j.at("normalization").at("std").get<std::vector<double>>();
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.file = e.at("file").get<std::string>();
      const auto& params = e.at("params");
      for (const auto& r : m.spec.param_ranges)
        entry.params.emplace_back(r.name, params.at(r.name).get<double>());
      entry.seed = e.at("seed").get<uint64_t>();
      entry.split = e.at("split").get<std::string>();
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrCode::format,
                "manifest: missing fields in " + path + ": " + e.what());
  }
  for (const auto& e : m.entries) {
    std::string file = dir + "/" + e.file;
    if (!std::filesystem::exists(file))
      throw Error(ErrCode::missing, "manifest: listed file missing: " + file);
  }
  return m;
}

inline Trajectory load_entry(const std::string& dir, const ManifestEntry& e) {
  return read_trajectory(dir + "/" + e.file);
}

struct DatasetCounts {
  int64_t pretrain = 512;
  int64_t labeled = 256;  // split 60/20/20 into train/val/test
};

// Generate a full per-system dataset directory: trajectories on disk, split
// assignment, and per-channel normalization statistics computed over the
// pretrain split only.
inline DatasetManifest build_dataset(const SystemSpec& spec,
                                     const DatasetCounts& counts,
                                     const std::string& dir, uint64_t seed) {
  spec.validate();
  if (counts.pretrain < 1 || counts.labeled < 5)
    throw Error(ErrCode::value, "build_dataset: too few trajectories");
  std::filesystem::create_directories(dir);

  int64_t total = counts.pretrain + counts.labeled;
  Rng param_rng(Rng(seed).fork(1).seed());
  auto params = sample_parameters(spec, total, param_rng.seed());

  int64_t n_train = (counts.labeled * 60) / 100;
  int64_t n_val = (counts.labeled * 20) / 100;

  DatasetManifest m;
  m.system = spec.system;
  m.spec = spec;
  std::vector<double> sum, sumsq;
  int64_t pixels_per_channel = 0;

  for (int64_t i = 0; i < total; ++i) {
    uint64_t traj_seed = Rng(seed).fork(100 + static_cast<uint64_t>(i)).seed();
    Trajectory traj = simulate(spec, params[static_cast<size_t>(i)], traj_seed);
    char name[64];
    std::snprintf(name, sizeof(name), "traj_%05lld.bin",
                  static_cast<long long>(i));
    write_trajectory(dir + "/" + name, traj);

    ManifestEntry e;
    e.file = name;
    e.params = traj.params;
    e.seed = traj_seed;
    if (i < counts.pretrain)
      e.split = "pretrain";
    else if (i < counts.pretrain + n_train)
      e.split = "train";
    else if (i < counts.pretrain + n_train + n_val)
      e.split = "val";
    else
      e.split = "test";
    m.entries.push_back(std::move(e));

    if (i < counts.pretrain) {
      if (sum.empty()) {
        sum.assign(static_cast<size_t>(traj.C), 0.0);
        sumsq.assign(static_cast<size_t>(traj.C), 0.0);
      }
      for (int64_t t = 0; t < traj.T; ++t)
        for (int64_t c = 0; c < traj.C; ++c) {
          size_t off = traj.frame_offset(t, c);
          for (int64_t p = 0; p < traj.H * traj.W; ++p) {
            double v = traj.frames[off + static_cast<size_t>(p)];
            sum[static_cast<size_t>(c)] += v;
            sumsq[static_cast<size_t>(c)] += v * v;
          }
        }
      pixels_per_channel += traj.T * traj.H * traj.W;
    }
  }

  for (size_t c = 0; c < sum.size(); ++c) {
    double mean = sum[c] / static_cast<double>(pixels_per_channel);
    double var = sumsq[c] / static_cast<double>(pixels_per_channel) - mean * mean;
    m.channel_mean.push_back(mean);
    m.channel_std.push_back(std::sqrt(std::max(var, 0.0)) + 1e-12);
  }
  write_manifest(dir, m);
  return m;
}

// Clip tensor [1, C, k, H, W] from frames [t0, t0+k), normalized per channel.
inline Tensor clip_tensor(const Trajectory& traj, int64_t t0, int64_t k,
                          const std::vector<double>& mean,
                          const std::vector<double>& std) {
  if (t0 < 0 || t0 + k > traj.T)
    throw Error(ErrCode::value, "clip_tensor: window [" + std::to_string(t0) +
                                    "," + std::to_string(t0 + k) +
                                    ") outside trajectory of length " +
                                    std::to_string(traj.T));
  if (static_cast<int64_t>(mean.size()) != traj.C ||
      static_cast<int64_t>(std.size()) != traj.C)
    throw Error(ErrCode::shape, "clip_tensor: stats do not match channels");
  std::vector<double> data(static_cast<size_t>(traj.C * k * traj.H * traj.W));
  size_t hw = static_cast<size_t>(traj.H * traj.W);
  for (int64_t c = 0; c < traj.C; ++c)
    for (int64_t t = 0; t < k; ++t) {
      size_t src = traj.frame_offset(t0 + t, c);
      size_t dst = (static_cast<size_t>(c) * static_cast<size_t>(k) +
                    static_cast<size_t>(t)) * hw;
      for (size_t p = 0; p < hw; ++p)
        data[dst + p] = (traj.frames[src + p] - mean[static_cast<size_t>(c)]) /
                        std[static_cast<size_t>(c)];
    }
  return Tensor::from({1, traj.C, k, traj.H, traj.W}, std::move(data));
}

}  // namespace dynrep
