#include "ewcdr/log.hpp"

#include <iostream>
#include <mutex>

namespace ewcdr {

namespace {
std::mutex g_mutex;
LogSink g_sink;
LogLevel g_level = LogLevel::warning;

const char* name(LogLevel level) {
  switch (level) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warning: return "warning";
    case LogLevel::error: return "error";
  }
  return "?";
}
}  // namespace

LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(g_mutex);
  std::swap(g_sink, sink);
  return sink;
}

void set_log_level(LogLevel level) {
  std::lock_guard lock(g_mutex);
  g_level = level;
}

void log(LogLevel level, const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (g_sink) {
    g_sink(level, message);
    return;
  }
  if (level < g_level) return;
  std::cerr << "[ewcdr " << name(level) << "] " << message << '\n';
}

}  // namespace ewcdr
