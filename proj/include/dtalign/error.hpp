#pragma once

#include <stdexcept>
#include <string>

namespace dtalign {

enum class ErrorKind {
    Format,      // malformed file contents
    Validation,  // inputs violate a documented precondition
    IO,          // filesystem failures
    Numerical,   // degenerate matrices, divergence, undefined metrics
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw Error(ErrorKind::Validation, what);
}

}  // namespace dtalign
