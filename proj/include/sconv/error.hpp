#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sconv {

// Machine-readable error categories. The CLI prints the category name on
// stderr so scripts can branch on it.
enum class ErrorKind {
  dimension,
  numeric,
  state,
  data,
  config,
  io,
  metric,
  generation,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace sconv
