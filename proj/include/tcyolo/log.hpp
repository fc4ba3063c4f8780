#pragma once

#include <functional>
#include <string>

namespace tcyolo {

/// Non-fatal diagnostics. The default sink prints "warning: <msg>" to stderr.
void warn(const std::string& message);

/// Replaces the warning sink; returns the previous one. An empty function
/// restores the default.
std::function<void(const std::string&)> set_warning_sink(std::function<void(const std::string&)> sink);

}  // namespace tcyolo
