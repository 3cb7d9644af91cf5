#include "tseg/log.hpp"

#include <cstdio>
#include <mutex>
#include <utility>

namespace tseg {

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

LogSink& current_sink() {
  static LogSink sink;
  return sink;
}

}  // namespace

void log_warning(const std::string& message) {
  std::lock_guard lock(sink_mutex());
  if (current_sink()) {
    current_sink()(message);
  } else {
    std::fprintf(stderr, "warning: %s\n", message.c_str());
  }
}

LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(sink_mutex());
  return std::exchange(current_sink(), std::move(sink));
}

WarningCapture::WarningCapture() {
  previous_ = set_log_sink([this](const std::string& m) {
    ++count_;
    last_ = m;
  });
}

WarningCapture::~WarningCapture() { set_log_sink(std::move(previous_)); }

}  // namespace tseg
