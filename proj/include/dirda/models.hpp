#pragma once

// Registration (R), segmentation (S / downstream F) and discriminator (D)
// networks. All layers call rank-generic ATen kernels, so one definition
// serves 2D ([N,C,H,W]) and 3D ([N,C,D,H,W]) inputs.

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "dirda/types.hpp"
#include "dirda/warp.hpp"

namespace dirda::models {

struct ConvOptions {
  std::int64_t in = 1, out = 1, kernel = 3, stride = 1;
  std::int64_t rank = 2;
  bool bias = true;
};

/// Convolution over `rank` spatial axes with "same"-style padding.
class ConvNdImpl : public torch::nn::Module {
 public:
  explicit ConvNdImpl(const ConvOptions& opts);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight, bias;

 private:
  ConvOptions opts_;
};
TORCH_MODULE(ConvNd);

struct UNetOptions {
  std::int64_t in_channels = 1;
  std::int64_t base_channels = 16;
  std::int64_t levels = 4;  // resolution levels; input sides must divide 2^(levels-1)
  std::int64_t rank = 2;
  bool instance_norm = true;
  double leaky_slope = 0.2;

  [[nodiscard]] nlohmann::json to_json() const;
  static UNetOptions from_json(const nlohmann::json& j);
};

/// Encoder-decoder with skip connections. Returns full-resolution features
/// (base_channels wide); the bottleneck activation of the last call is kept
/// for feature-space heads.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetOptions& opts);
  torch::Tensor forward(const torch::Tensor& x);

  [[nodiscard]] const torch::Tensor& bottleneck() const { return bottleneck_; }
  [[nodiscard]] std::int64_t bottleneck_channels() const;
  [[nodiscard]] const UNetOptions& options() const { return opts_; }

 private:
  torch::Tensor block(const torch::Tensor& x, ConvNd& conv);

  UNetOptions opts_;
  std::vector<ConvNd> enc_, down_, dec_, fuse_;
  torch::Tensor bottleneck_;
};
TORCH_MODULE(UNet);

/// R: (source, target) -> stationary velocity field, D channels, pixel units.
/// The output convolution starts at exactly zero, so the initial map is the
/// identity.
class RegistrationNetImpl : public torch::nn::Module {
 public:
  explicit RegistrationNetImpl(const UNetOptions& opts);
  warp::VelocityField forward(const torch::Tensor& source, const torch::Tensor& target);

  [[nodiscard]] const UNetOptions& options() const { return opts_; }

 private:
  UNetOptions opts_;
  UNet body_{nullptr};
  ConvNd head_{nullptr};
};
TORCH_MODULE(RegistrationNet);

/// S / F: image -> per-class softmax probabilities [N, K, *S].
class SegmenterNetImpl : public torch::nn::Module {
 public:
  SegmenterNetImpl(const UNetOptions& opts, std::int64_t num_classes = 2);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor logits(const torch::Tensor& x);

  [[nodiscard]] const torch::Tensor& bottleneck() const { return body_->bottleneck(); }
  [[nodiscard]] std::int64_t bottleneck_channels() const { return body_->bottleneck_channels(); }
  [[nodiscard]] const UNetOptions& options() const { return opts_; }
  [[nodiscard]] std::int64_t num_classes() const { return num_classes_; }

 private:
  UNetOptions opts_;
  std::int64_t num_classes_;
  UNet body_{nullptr};
  ConvNd head_{nullptr};
};
TORCH_MODULE(SegmenterNet);

struct DiscriminatorOptions {
  std::int64_t in_channels = 1;
  std::int64_t base_channels = 16;
  std::int64_t blocks = 4;
  std::int64_t rank = 2;
  bool patch = false;  // true: logit grid; false: one global logit per image
  double leaky_slope = 0.2;

  [[nodiscard]] nlohmann::json to_json() const;
  static DiscriminatorOptions from_json(const nlohmann::json& j);
};

/// D: image -> real/fake logit(s). No normalisation layers.
class DiscriminatorNetImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorNetImpl(const DiscriminatorOptions& opts);
  torch::Tensor forward(const torch::Tensor& x);

  [[nodiscard]] const DiscriminatorOptions& options() const { return opts_; }

 private:
  DiscriminatorOptions opts_;
  std::vector<ConvNd> convs_;
  ConvNd head_{nullptr};
};
TORCH_MODULE(DiscriminatorNet);

/// Small MLP on globally pooled bottleneck features: domain logit.
class DomainClassifierImpl : public torch::nn::Module {
 public:
  DomainClassifierImpl(std::int64_t in_channels, std::int64_t hidden = 32);
  torch::Tensor forward(const torch::Tensor& features);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(DomainClassifier);

/// Temporarily turns off requires_grad on a module's parameters; restores on
/// scope exit. Gradients cannot reach a frozen module.
class Freeze {
 public:
  explicit Freeze(torch::nn::Module& m);
  ~Freeze();
  Freeze(const Freeze&) = delete;
  Freeze& operator=(const Freeze&) = delete;

 private:
  std::vector<std::pair<torch::Tensor, bool>> saved_;
};

/// sha256 over parameter bytes, in registration order.
std::string parameter_hash(const torch::nn::Module& m);

/// Checkpoint: <stem>.pt with the parameters, <stem>.json with architecture,
/// step and config hash. Both written atomically.
void save_checkpoint(const torch::nn::Module& m, const std::filesystem::path& stem,
                     const nlohmann::json& meta);
nlohmann::json load_checkpoint(torch::nn::Module& m, const std::filesystem::path& stem);

/// Add batch/channel axes: [*S] -> [1, 1, *S].
torch::Tensor as_batch(const torch::Tensor& img);

}  // namespace dirda::models
