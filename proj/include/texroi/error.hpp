#pragma once

#include <stdexcept>
#include <string>

namespace texroi {

enum class ErrorKind {
  Io,          // file missing, unreadable or unwritable
  Parse,       // malformed text or binary payload
  Invalid,     // argument violates a precondition
  FlatImage,   // intensity statistics undefined for a constant image
  Degenerate,  // geometry with zero extent, empty mask, self-intersection
  Schema,      // feature/shape mismatch between model and input
  Version,     // serialized artifact with an unknown or corrupt header
  Usage,       // command-line misuse
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace texroi
