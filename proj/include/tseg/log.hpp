#pragma once

#include <functional>
#include <string>

namespace tseg {

using LogSink = std::function<void(const std::string&)>;

/// Emit a warning line. The default sink writes to stderr.
void log_warning(const std::string& message);

/// Replace the warning sink; returns the previous one. Passing an empty
/// function restores stderr output.
LogSink set_log_sink(LogSink sink);

/// Counts warnings emitted while alive. Useful in tests.
class WarningCapture {
 public:
  WarningCapture();
  ~WarningCapture();
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  int count() const { return count_; }
  const std::string& last() const { return last_; }

 private:
  LogSink previous_;
  int count_ = 0;
  std::string last_;
};

}  // namespace tseg
