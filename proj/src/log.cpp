#include "texroi/log.hpp"

#include <cstdlib>
#include <mutex>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "texroi/error.hpp"

namespace texroi {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Invalid: return "invalid";
    case ErrorKind::FlatImage: return "flat-image";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Version: return "version";
    case ErrorKind::Usage: return "usage";
  }
  return "unknown";
}

std::shared_ptr<spdlog::logger> logger() {
  static std::once_flag once;
  static std::shared_ptr<spdlog::logger> instance;
  std::call_once(once, [] {
    instance = spdlog::stderr_color_mt("texroi");
    instance->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    const char* env = std::getenv("TEXROI_LOG");
    instance->set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
  });
  return instance;
}

void set_log_level(const char* level) {
  logger()->set_level(spdlog::level::from_str(level));
}

}  // namespace texroi
