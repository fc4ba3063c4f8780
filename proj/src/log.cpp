#include "tcyolo/log.hpp"

#include <iostream>

namespace tcyolo {

namespace {
std::function<void(const std::string&)>& sink() {
  static std::function<void(const std::string&)> s;
  return s;
}
}  // namespace

void warn(const std::string& message) {
  if (sink())
    sink()(message);
  else
    std::cerr << "warning: " << message << "\n";
}

std::function<void(const std::string&)> set_warning_sink(std::function<void(const std::string&)> s) {
  auto old = std::move(sink());
  sink() = std::move(s);
  return old;
}

}  // namespace tcyolo
