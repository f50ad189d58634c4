#include <filesystem>
#include <string_view>
#include <utility>

#include "btt/scheduler.hpp"

namespace btt {

namespace {

constexpr std::pair<std::string_view, std::string_view> kBuiltin[] = {
#include "builtin_spaces.inc"
};

}  // namespace

std::vector<std::string> builtin_space_names() {
  std::vector<std::string> out;
  for (const auto& [name, _] : kBuiltin) out.emplace_back(name);
  return out;
}

SearchSpace builtin_space(std::string_view name) {
  for (const auto& [n, text] : kBuiltin)
    if (n == name) return SearchSpace::parse(text);
  fail(ErrorCode::invalid_input, "no built-in space '" + std::string(name) + "'");
}

SearchSpace resolve_space(std::string_view name_or_path) {
  for (const auto& [n, text] : kBuiltin)
    if (n == name_or_path) return SearchSpace::parse(text);
  const std::filesystem::path p(name_or_path);
  if (!std::filesystem::exists(p))
    fail(ErrorCode::invalid_input, "'" + std::string(name_or_path) + "' is neither a built-in space nor a file");
  return SearchSpace::load(p);
}

}  // namespace btt
