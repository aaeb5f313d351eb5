#pragma once

#include <algorithm>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"

namespace headsplat::cli {

// Reads --config files as JSON when they start with '{', TOML otherwise.
// JSON keys may use '_' or '-'. Keys are placed under `section` (the
// invoked verb, e.g. {"template", "gen"}) unless already inside it.
class JsonOrTomlConfig : public CLI::ConfigTOML {
 public:
  std::vector<std::string> section;

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    const std::string text((std::istreambuf_iterator<char>(input)), std::istreambuf_iterator<char>());
    const auto first = text.find_first_not_of(" \t\r\n");
    std::vector<CLI::ConfigItem> items;
    if (first == std::string::npos || text[first] != '{') {
      std::istringstream toml(text);
      items = CLI::ConfigTOML::from_config(toml);
    } else {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception& e) {
        throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
      }
      flatten(j, {}, items);
    }
    std::vector<CLI::ConfigItem> placed;
    for (auto& item : items) {
      // The TOML reader emits section open/close markers named "++"/"--".
      if (item.name == "++" || item.name == "--") continue;
      const bool inside = item.parents.size() >= section.size() &&
                          std::equal(section.begin(), section.end(), item.parents.begin());
      if (!inside) item.parents.insert(item.parents.begin(), section.begin(), section.end());
      placed.push_back(std::move(item));
    }
    return placed;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const nlohmann::json& j, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, value] : j.items()) {
      std::string name = key;
      for (char& c : name) {
        if (c == '_') c = '-';
      }
      if (value.is_object()) {
        auto next = parents;
        next.push_back(name);
        flatten(value, next, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = name;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      out.push_back(std::move(item));
    }
  }
};

}  // namespace headsplat::cli
