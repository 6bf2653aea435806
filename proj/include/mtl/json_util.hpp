#pragma once

#include <initializer_list>
#include <json.hpp>
#include <string>

#include "mtl/errors.hpp"

namespace mtl {

// Fail-fast guard against config typos: every present key must be allowed.
inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + context);
  }
}

template <typename T>
T get_required(const nlohmann::json& j, const char* key, const std::string& context) {
  if (!j.contains(key)) {
    throw ConfigError(context + " is missing required key \"" + key + "\"");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("key \"" + std::string(key) + "\" in " + context + " has the wrong type");
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, const std::string& context, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("key \"" + std::string(key) + "\" in " + context + " has the wrong type");
  }
}

}  // namespace mtl
