#pragma once

#include <stdexcept>
#include <string>

namespace dynrep {

// Error categories; the CLI maps them to machine-parsable exit prefixes.
enum class ErrCode {
  shape,    // tensor/op shape mismatch
  value,    // bad argument value or violated precondition
  state,    // wrong call order (e.g. backward re-entry)
  numeric,  // non-finite values where finite required
  io,       // filesystem failures
  format,   // corrupt or mismatching on-disk data
  missing,  // referenced artifact does not exist
  usage,    // bad CLI invocation
};

inline const char* err_code_name(ErrCode c) {
  switch (c) {
    case ErrCode::shape: return "E_SHAPE";
    case ErrCode::value: return "E_VALUE";
    case ErrCode::state: return "E_STATE";
    case ErrCode::numeric: return "E_NUMERIC";
    case ErrCode::io: return "E_IO";
    case ErrCode::format: return "E_FORMAT";
    case ErrCode::missing: return "E_MISSING";
    case ErrCode::usage: return "E_USAGE";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrCode code() const { return code_; }

 private:
  ErrCode code_;
};

}  // namespace dynrep
