#pragma once

#include <memory>

namespace spdlog {
class logger;
}

namespace texroi {

/// Shared logger writing to stderr. Level comes from the TEXROI_LOG
/// environment variable (trace, debug, info, warn, error, off); default warn.
std::shared_ptr<spdlog::logger> logger();

/// Overrides the level picked from the environment.
void set_log_level(const char* level);

}  // namespace texroi
