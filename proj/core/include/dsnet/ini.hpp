#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace dsnet::ini {

/// key -> values of one section; scalar keys hold one value.
using Section = std::map<std::string, std::vector<std::string>>;

/// Parses INI/TOML-style text into section name -> Section. Keys before any
/// header land in the "" section.
std::map<std::string, Section> parse_sections(const std::string& text);
std::string read_file(const std::filesystem::path& path);

/// Shortest round-tripping decimal form.
std::string number_text(double v);

const std::vector<std::string>* find_key(const Section& s, const std::string& key);
std::int64_t to_int(const std::string& key, const std::string& v);
double to_double(const std::string& key, const std::string& v);
bool to_bool(const std::string& key, const std::string& v);

void read_int(const Section& s, const std::string& key, std::int64_t& dst);
void read_double(const Section& s, const std::string& key, double& dst);
void read_bool(const Section& s, const std::string& key, bool& dst);
void read_string(const Section& s, const std::string& key, std::string& dst);
void read_stages(const Section& s, const std::string& key, std::array<std::int64_t, 4>& dst);
void reject_unknown(const Section& s, std::initializer_list<const char*> known, const std::string& where);

}  // namespace dsnet::ini
