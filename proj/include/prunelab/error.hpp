#pragma once

#include <stdexcept>
#include <string>

namespace prunelab {

enum class ErrorKind {
  config,      // bad experiment configuration
  data,        // bad dataset contents or labels
  format,      // malformed file (checkpoint, CIFAR binary, plan log)
  structural,  // shape mismatch or broken model graph
  numeric,     // non-finite values, SVD non-convergence
  pruning,     // request that surgery cannot satisfy
  plan,        // malformed pruning plan
  report,      // incompatible report inputs
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config error";
    case ErrorKind::data: return "data error";
    case ErrorKind::format: return "format error";
    case ErrorKind::structural: return "structural error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::pruning: return "pruning error";
    case ErrorKind::plan: return "plan error";
    case ErrorKind::report: return "report error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

// Process exit code used by the command-line tool for each error family.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 1;
    case ErrorKind::data:
    case ErrorKind::format:
    case ErrorKind::report: return 2;
    default: return 3;
  }
}

}  // namespace prunelab
