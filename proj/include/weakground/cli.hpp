#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "weakground/engine.hpp"
#include "weakground/synthworld.hpp"

namespace wg {

/// Bad flags, unknown config keys or malformed values. Maps to exit status 1.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using KeyValues = std::map<std::string, std::string>;

/// Flat `key=value` lines; `#` starts a comment. The path "default" means no file.
KeyValues load_config_file(const std::string& path);
KeyValues parse_config_text(const std::string& text);

struct Settings {
  std::uint64_t seed = 0;
  GenConfig gen;
  TrainConfig train;
};

/// Built-in defaults, then `file`, then `flags`. Unknown keys are usage errors.
Settings resolve_settings(const KeyValues& file, const KeyValues& flags);

/// Every known key with its current value, in a stable order.
std::string dump_settings(const Settings& s);

/// Runs one command; returns the process exit status (0 ok, 1 usage, 2 runtime).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wg
