#pragma once

#include <stdexcept>
#include <string>

namespace pmil {

// Bad inputs or configs; maps to CLI exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  explicit ValidationError(const std::string& what)
      : std::invalid_argument(what) {}
};

// Non-finite loss or unrecoverable runtime failure; maps to CLI exit code 3.
class RuntimeAbort : public std::runtime_error {
 public:
  explicit RuntimeAbort(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace pmil
