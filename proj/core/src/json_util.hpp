#pragma once

// Private helpers shared by the core sources that speak JSON.

#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mhgpt/error.hpp"

namespace mhgpt::detail {

using ojson = nlohmann::ordered_json;

/// Collects "section.key" for every key in `j` that is not in `known`.
inline void collect_unknown_keys(const ojson& j, const std::set<std::string>& known, const std::string& section,
                                 std::vector<std::string>& unknown) {
  if (!j.is_object()) return;
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) unknown.push_back(section.empty() ? k : section + "." + k);
  }
}

template <class V>
void read_field(const ojson& j, const char* key, V& out, const std::string& section,
                std::vector<std::string>& problems) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const ojson::exception&) {
    problems.push_back((section.empty() ? std::string(key) : section + "." + key) + ": wrong type");
  }
}

inline void throw_if_problems(const std::string& what, const std::vector<std::string>& problems) {
  if (problems.empty()) return;
  std::string msg = what;
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

}  // namespace mhgpt::detail
