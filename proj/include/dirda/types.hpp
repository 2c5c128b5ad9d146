#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace dirda {

// Error taxonomy. The CLI maps each family onto a process exit code.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LabelLeakError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Domain : std::uint8_t { source, target };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

/// Dense scalar grid, float32, spatial shape only ([H,W] or [D,H,W]).
struct Image {
  torch::Tensor pixels;
  Domain domain = Domain::source;

  [[nodiscard]] std::int64_t rank() const { return pixels.dim(); }
};

/// Integer class ids {0 = background, 1 = digit}, uint8, same shape as its image.
struct LabelMask {
  torch::Tensor classes;
};

/// One training sample of either domain. Target samples never carry a mask
/// here; their ground truth lives in a LabelVault.
struct Sample {
  std::int64_t id = 0;
  Image image;
  std::optional<LabelMask> mask;
  std::uint64_t seed = 0;
};

/// (source image + label, target image)
struct DomainPair {
  const Sample* source = nullptr;
  const Sample* target = nullptr;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

inline void require_config(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace dirda
