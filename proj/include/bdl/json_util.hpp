#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "bdl/error.hpp"

namespace bdl {

// Throws ConfigError naming `where.key` for the first key of object j not in `allowed`.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                               const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a mapping");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || a == key;
    if (!known) throw ConfigError((where.empty() ? key : where + "." + key) + ": unknown key");
  }
}

}  // namespace bdl
