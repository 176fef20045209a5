#include "sbt/log.hpp"

#include <iostream>
#include <mutex>

namespace sbt {
namespace {

std::mutex g_mutex;

LogSink& sink() {
  static LogSink s = [](LogLevel level, const std::string& msg) {
    if (level == LogLevel::kWarning) std::cerr << "warning: " << msg << '\n';
  };
  return s;
}

}  // namespace

void set_log_sink(LogSink s) {
  std::lock_guard lock(g_mutex);
  sink() = std::move(s);
}

void log(LogLevel level, const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (sink()) sink()(level, message);
}

}  // namespace sbt
