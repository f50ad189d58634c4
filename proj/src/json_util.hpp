#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "btt/error.hpp"
#include "btt/trace.hpp"

namespace btt::detail {

using Json = nlohmann::ordered_json;

// Non-finite reals travel as the strings "NaN", "Infinity", "-Infinity".
inline Json real_to_json(double x) {
  if (std::isnan(x)) return "NaN";
  if (std::isinf(x)) return x > 0 ? "Infinity" : "-Infinity";
  return x;
}

inline double json_to_real(const Json& j, std::string_view field) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "NaN") return std::nan("");
    if (s == "Infinity") return HUGE_VAL;
    if (s == "-Infinity") return -HUGE_VAL;
  }
  fail(ErrorCode::parse_error, "field '" + std::string(field) + "' is not a number");
}

inline const Json& require(const Json& obj, std::string_view field) {
  auto it = obj.find(field);
  if (it == obj.end()) fail(ErrorCode::parse_error, "missing field '" + std::string(field) + "'");
  return *it;
}

inline std::string require_string(const Json& obj, std::string_view field) {
  const Json& v = require(obj, field);
  if (!v.is_string()) fail(ErrorCode::parse_error, "field '" + std::string(field) + "' is not a string");
  return v.get<std::string>();
}

inline std::int64_t require_int(const Json& obj, std::string_view field) {
  const Json& v = require(obj, field);
  if (!v.is_number_integer()) fail(ErrorCode::parse_error, "field '" + std::string(field) + "' is not an integer");
  return v.get<std::int64_t>();
}

inline double require_real(const Json& obj, std::string_view field) {
  return json_to_real(require(obj, field), field);
}

Json hp_config_to_json(const HpConfig& config);
HpConfig hp_config_from_json(const Json& j);

inline std::string dump_line(const Json& j) { return j.dump(-1, ' ', false, Json::error_handler_t::strict); }

}  // namespace btt::detail
