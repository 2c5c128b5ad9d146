#include "dirda/types.hpp"

namespace dirda {

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(std::string_view s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw ConfigError("unknown domain tag: " + std::string(s));
}

}  // namespace dirda
