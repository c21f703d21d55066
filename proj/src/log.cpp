#include "diffreg/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <memory>
#include <string>

namespace diffreg::log {

namespace {

spdlog::logger& logger() {
  static const std::shared_ptr<spdlog::logger> instance = [] {
    auto l = spdlog::stderr_color_mt("diffreg");
    l->set_pattern("[%l] %v");
    l->set_level(spdlog::level::warn);
    return l;
  }();
  return *instance;
}

}  // namespace

bool set_level(std::string_view level) {
  if (level == "error") logger().set_level(spdlog::level::err);
  else if (level == "warn") logger().set_level(spdlog::level::warn);
  else if (level == "info") logger().set_level(spdlog::level::info);
  else if (level == "debug") logger().set_level(spdlog::level::debug);
  else return false;
  return true;
}

void init_from_env() {
  const char* env = std::getenv("DIFFREG_LOG");
  if (env != nullptr) set_level(env);
}

void error(std::string_view msg) { logger().error("{}", msg); }
void warn(std::string_view msg) { logger().warn("{}", msg); }
void info(std::string_view msg) { logger().info("{}", msg); }
void debug(std::string_view msg) { logger().debug("{}", msg); }

}  // namespace diffreg::log
