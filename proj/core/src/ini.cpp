#include "dsnet/ini.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dsnet/error.hpp"

namespace dsnet::ini {

std::map<std::string, Section> parse_sections(const std::string& text) {
  std::istringstream is(text);
  CLI::ConfigTOML reader;
  std::map<std::string, Section> out;
  try {
    for (const auto& item : reader.from_config(is)) {
      if (item.name == "++" || item.name == "--") continue;  // section markers
      std::string section;
      for (const auto& p : item.parents) section += (section.empty() ? "" : ".") + p;
      out[section][item.name] = item.inputs;
    }
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("malformed config text: ") + e.what());
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string number_text(double v) {
  char buf[64];
  if (std::isfinite(v) && v == std::trunc(v) && std::abs(v) < 1e15) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

const std::vector<std::string>* find_key(const Section& s, const std::string& key) {
  auto it = s.find(key);
  return it == s.end() ? nullptr : &it->second;
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

namespace {
const std::string& single(const Section& s, const std::string& key) {
  const auto* v = find_key(s, key);
  if (v->size() != 1) throw ConfigError("config key '" + key + "' needs one value");
  return v->front();
}
}  // namespace

void read_int(const Section& s, const std::string& key, std::int64_t& dst) {
  if (find_key(s, key)) dst = to_int(key, single(s, key));
}

void read_double(const Section& s, const std::string& key, double& dst) {
  if (find_key(s, key)) dst = to_double(key, single(s, key));
}

void read_bool(const Section& s, const std::string& key, bool& dst) {
  if (find_key(s, key)) dst = to_bool(key, single(s, key));
}

void read_string(const Section& s, const std::string& key, std::string& dst) {
  if (find_key(s, key)) dst = single(s, key);
}

void read_stages(const Section& s, const std::string& key, std::array<std::int64_t, 4>& dst) {
  if (auto v = find_key(s, key)) {
    if (v->size() != 4) throw ConfigError("config key '" + key + "' needs exactly 4 values");
    for (int i = 0; i < 4; ++i) dst[i] = to_int(key, (*v)[i]);
  }
}

void reject_unknown(const Section& s, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, _] : s) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in [" + where + "]");
  }
}

}  // namespace dsnet::ini
