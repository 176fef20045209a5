#pragma once

#include <functional>
#include <string>

namespace sbt {

enum class LogLevel { kInfo, kWarning };

using LogSink = std::function<void(LogLevel, const std::string&)>;

/// Replaces the process-wide sink; the default writes warnings to stderr.
void set_log_sink(LogSink sink);
void log(LogLevel level, const std::string& message);
inline void warn(const std::string& message) { log(LogLevel::kWarning, message); }

}  // namespace sbt
