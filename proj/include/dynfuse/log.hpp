#pragma once

#include <cstdlib>
#include <iostream>
#include <string>

namespace dynfuse {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// DYNFUSE_LOG={error|info|debug}; defaults to error. Messages go to stderr.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("DYNFUSE_LOG");
    const std::string v = env ? env : "";
    if (v == "debug") return LogLevel::kDebug;
    if (v == "info") return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

inline void log_at(LogLevel level, const char* tag, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) {
    std::cerr << "[" << tag << "] " << msg << "\n";
  }
}

inline void log_error(const std::string& msg) { log_at(LogLevel::kError, "error", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::kInfo, "info", msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::kDebug, "debug", msg); }

}  // namespace dynfuse
