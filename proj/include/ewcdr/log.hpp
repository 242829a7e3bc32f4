#pragma once

#include <functional>
#include <string>

namespace ewcdr {

enum class LogLevel { debug, info, warning, error };

using LogSink = std::function<void(LogLevel, const std::string&)>;

// Messages go to stderr unless a sink is installed; returns the old sink.
LogSink set_log_sink(LogSink sink);
void set_log_level(LogLevel level);
void log(LogLevel level, const std::string& message);

inline void log_info(const std::string& m) { log(LogLevel::info, m); }
inline void log_warning(const std::string& m) { log(LogLevel::warning, m); }

}  // namespace ewcdr
