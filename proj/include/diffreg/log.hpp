#pragma once

#include <string_view>

namespace diffreg::log {

/// Reads DIFFREG_LOG ∈ {error, warn, info, debug}; defaults to warn.
void init_from_env();
/// Returns false for an unknown level name.
bool set_level(std::string_view level);

void error(std::string_view msg);
void warn(std::string_view msg);
void info(std::string_view msg);
void debug(std::string_view msg);

}  // namespace diffreg::log
