#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "abm/error.hpp"
#include "json.hpp"

namespace abm::detail {

inline std::string join_path(const std::string& parent, std::string_view key) {
  return parent.empty() ? std::string(key) : parent + "." + std::string(key);
}

inline void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) fail(ErrorCode::config, "'" + path + "' must be an object");
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& path,
                                std::initializer_list<std::string_view> allowed) {
  require_object(j, path);
  for (const auto& item : j.items()) {
    bool known = false;
    for (auto a : allowed) known = known || item.key() == a;
    if (!known) fail(ErrorCode::config, "unknown key '" + join_path(path, item.key()) + "'");
  }
}

// Reads j[key] into `out` when present; type errors name the key path.
template <typename T>
void read_optional(const nlohmann::json& j, std::string_view key, const std::string& path, T& out) {
  const auto it = j.find(std::string(key));
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::config, "invalid value for '" + join_path(path, key) + "'");
  }
}

template <typename T>
T read_required(const nlohmann::json& j, std::string_view key, const std::string& path) {
  if (!j.contains(std::string(key))) {
    fail(ErrorCode::config, "missing required key '" + join_path(path, key) + "'");
  }
  T out{};
  read_optional(j, key, path, out);
  return out;
}

}  // namespace abm::detail
