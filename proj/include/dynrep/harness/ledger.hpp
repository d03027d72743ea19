#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynrep/core/error.hpp"

namespace dynrep {

struct LedgerEntry {
  std::string stage;
  std::string hash;  // hex config hash of everything the stage depends on
  std::vector<std::string> artifacts;
};

// Append-only completion record. Each completed stage appends one JSON line;
// on lookup the last line per stage wins. Appends take an exclusive file
// lock so parallel worker processes can record safely.
class RunLedger {
 public:
  explicit RunLedger(std::string path) : path_(std::move(path)) { reload(); }

  const std::string& path() const { return path_; }

  void reload() {
    latest_.clear();
    std::ifstream f(path_);
    if (!f) return;  // no ledger yet
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
        LedgerEntry e;
        e.stage = j.at("stage").get<std::string>();
        e.hash = j.at("hash").get<std::string>();
        e.artifacts = j.at("artifacts").get<std::vector<std::string>>();
        latest_[e.stage] = std::move(e);
      } catch (const std::exception&) {
        throw Error(ErrCode::format, "ledger '" + path_ + "' line " +
                                         std::to_string(lineno) +
                                         " is not a valid entry");
      }
    }
  }

  const LedgerEntry* find(const std::string& stage) const {
    auto it = latest_.find(stage);
    return it == latest_.end() ? nullptr : &it->second;
  }

  // True when the stage was recorded with this hash and all of its artifacts
  // still exist on disk.
  bool completed(const std::string& stage, const std::string& hash) const {
    const LedgerEntry* e = find(stage);
    if (e == nullptr || e->hash != hash) return false;
    for (const auto& a : e->artifacts)
      if (!std::filesystem::exists(a)) return false;
    return true;
  }

  void record(const LedgerEntry& e) {
    nlohmann::json j{
        {"stage", e.stage}, {"hash", e.hash}, {"artifacts", e.artifacts}};
    std::string line = j.dump() + "\n";

    std::filesystem::path parent = std::filesystem::path(path_).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0)
      throw Error(ErrCode::io, "cannot open ledger '" + path_ + "' for append");
    if (::flock(fd, LOCK_EX) != 0) {
      ::close(fd);
      throw Error(ErrCode::io, "cannot lock ledger '" + path_ + "'");
    }
    ssize_t n = ::write(fd, line.data(), line.size());
    ::flock(fd, LOCK_UN);
    ::close(fd);
    if (n != static_cast<ssize_t>(line.size()))
      throw Error(ErrCode::io, "short write to ledger '" + path_ + "'");
    latest_[e.stage] = e;
  }

 private:
  std::string path_;
  std::map<std::string, LedgerEntry> latest_;
};

}  // namespace dynrep
