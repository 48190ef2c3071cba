#include "moeq/params.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string_view>

#include "moeq/error.hpp"

namespace moeq {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view value, int line) {
  T out{};
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || end != value.data() + value.size())
    throw ConfigError("params line " + std::to_string(line) + ": bad value for " + std::string(key) +
                      ": '" + std::string(value) + "'");
  return out;
}

}  // namespace

void PipelineParams::validate() const {
  fcm.validate();
  if (!(boundary_delta >= 0.0) || boundary_delta > 1.0)
    throw ConfigError("boundary.delta must be in [0, 1]");
  if (!(cache_fraction > 0.0) || cache_fraction > 1.0) throw ConfigError("cache.fraction must be in (0, 1]");
  if (probe_tokens == 0) throw ConfigError("online.probe_tokens must be >= 1");
}

PipelineParams parse_params(const std::string& text) {
  PipelineParams p;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("params line " + std::to_string(line_no) + ": expected key = value");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key == "fcm.c")
      p.fcm.clusters = parse_number<std::uint32_t>(key, value, line_no);
    else if (key == "fcm.m")
      p.fcm.fuzzifier = parse_number<double>(key, value, line_no);
    else if (key == "fcm.epsilon")
      p.fcm.epsilon = parse_number<double>(key, value, line_no);
    else if (key == "fcm.max_iters")
      p.fcm.max_iters = parse_number<std::uint32_t>(key, value, line_no);
    else if (key == "boundary.delta")
      p.boundary_delta = parse_number<double>(key, value, line_no);
    else if (key == "cache.fraction")
      p.cache_fraction = parse_number<double>(key, value, line_no);
    else if (key == "online.probe_tokens")
      p.probe_tokens = parse_number<std::uint32_t>(key, value, line_no);
    else
      throw ConfigError("params line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
  }
  p.validate();
  return p;
}

PipelineParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open params file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_params(buf.str());
}

}  // namespace moeq
