#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/core/optim.hpp"

namespace dynrep {

// Checkpoint layout: 8-byte magic, u64 header length, JSON header (config,
// step, seed, parameter manifest), then every parameter's values as
// little-endian IEEE-754 32-bit floats, concatenated in declaration order.
inline constexpr char kCkptMagic[8] = {'D', 'R', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

inline void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw Error(ErrCode::state, "checkpoint: little-endian host required");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, nlohmann::json meta,
                            const std::vector<ParamRef>& params) {
  detail::require_little_endian();
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : params)
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  meta["params"] = std::move(manifest);
  std::string header = meta.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrCode::io, "checkpoint: cannot write " + path);
  f.write(kCkptMagic, sizeof(kCkptMagic));
  uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<float> buf;
  for (const auto& p : params) {
    const auto& d = p.tensor.data();
    buf.resize(d.size());
    for (size_t i = 0; i < d.size(); ++i) buf[i] = static_cast<float>(d[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!f) throw Error(ErrCode::io, "checkpoint: write failed for " + path);
}

// Reads the JSON header only (metadata inspection without loading weights).
inline nlohmann::json read_checkpoint_meta(const std::string& path) {
  detail::require_little_endian();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrCode::missing, "checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::string(magic, 8) != std::string(kCkptMagic, 8))
    throw Error(ErrCode::format, "checkpoint: bad magic in " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f) throw Error(ErrCode::format, "checkpoint: truncated header in " + path);
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw Error(ErrCode::format, "checkpoint: truncated header in " + path);
  nlohmann::json meta = nlohmann::json::parse(header, nullptr, false);
  if (meta.is_discarded())
    throw Error(ErrCode::format, "checkpoint: header is not valid JSON in " + path);
  return meta;
}

// Loads parameter values into an existing model's parameter list. Names and
// shapes must match the stored manifest exactly, in order.
inline nlohmann::json load_checkpoint(const std::string& path,
                                      std::vector<ParamRef>& params) {
  nlohmann::json meta = read_checkpoint_meta(path);
  const auto& manifest = meta.at("params");
  if (manifest.size() != params.size())
    throw Error(ErrCode::shape,
                "checkpoint: " + path + " stores " +
                    std::to_string(manifest.size()) + " params, model has " +
                    std::to_string(params.size()));
  std::ifstream f(path, std::ios::binary);
  uint64_t hlen = 0;
  f.seekg(sizeof(kCkptMagic));
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  f.seekg(static_cast<std::streamoff>(sizeof(kCkptMagic) + sizeof(hlen) + hlen));
  std::vector<float> buf;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    if (entry.at("name").get<std::string>() != params[i].name)
      throw Error(ErrCode::shape, "checkpoint: param " + std::to_string(i) +
                                      " is '" +
                                      entry.at("name").get<std::string>() +
                                      "', model expects '" + params[i].name + "'");
    Shape stored = entry.at("shape").get<Shape>();
    if (stored != params[i].tensor.shape())
      throw Error(ErrCode::shape,
                  "checkpoint: shape mismatch for " + params[i].name + ": " +
                      shape_str(stored) + " vs " +
                      shape_str(params[i].tensor.shape()));
    auto& d = params[i].tensor.mutable_data();
    buf.resize(d.size());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f)
      throw Error(ErrCode::format,
                  "checkpoint: truncated payload in " + path + " at " +
                      params[i].name);
    for (size_t j = 0; j < d.size(); ++j) d[j] = static_cast<double>(buf[j]);
  }
  return meta;
}

}  // namespace dynrep
