#include "dirda/models.hpp"

#include <cmath>

#include "dirda/io.hpp"

namespace dirda::models {

ConvNdImpl::ConvNdImpl(const ConvOptions& opts) : opts_(opts) {
  require(opts.rank == 2 || opts.rank == 3, "convolution rank must be 2 or 3");
  std::vector<std::int64_t> shape{opts.out, opts.in};
  for (std::int64_t d = 0; d < opts.rank; ++d) shape.push_back(opts.kernel);
  weight = register_parameter("weight", torch::empty(shape));
  torch::nn::init::kaiming_uniform_(weight, std::sqrt(5.0));
  if (opts.bias) {
    double fan_in = static_cast<double>(opts.in);
    for (std::int64_t d = 0; d < opts.rank; ++d) fan_in *= static_cast<double>(opts.kernel);
    const double bound = 1.0 / std::sqrt(fan_in);
    bias = register_parameter("bias", torch::empty({opts.out}).uniform_(-bound, bound));
  }
}

torch::Tensor ConvNdImpl::forward(const torch::Tensor& x) {
  const auto r = static_cast<std::size_t>(opts_.rank);
  const std::vector<std::int64_t> stride(r, opts_.stride), pad(r, opts_.kernel / 2), dil(r, 1),
      out_pad(r, 0);
  return torch::convolution(x, weight, bias, stride, pad, dil, false, out_pad, 1);
}

nlohmann::json UNetOptions::to_json() const {
  return {{"in_channels", in_channels}, {"base_channels", base_channels},
          {"levels", levels},           {"rank", rank},
          {"instance_norm", instance_norm}, {"leaky_slope", leaky_slope}};
}

UNetOptions UNetOptions::from_json(const nlohmann::json& j) {
  UNetOptions o;
  o.in_channels = j.value("in_channels", o.in_channels);
  o.base_channels = j.value("base_channels", o.base_channels);
  o.levels = j.value("levels", o.levels);
  o.rank = j.value("rank", o.rank);
  o.instance_norm = j.value("instance_norm", o.instance_norm);
  o.leaky_slope = j.value("leaky_slope", o.leaky_slope);
  return o;
}

namespace {

std::int64_t level_channels(const UNetOptions& o, std::int64_t level) {
  return o.base_channels * (std::int64_t{1} << std::min<std::int64_t>(level, 3));
}

torch::Tensor upsample2(torch::Tensor x, std::int64_t rank) {
  for (std::int64_t d = 0; d < rank; ++d) x = x.repeat_interleave(2, d + 2);
  return x;
}

}  // namespace

UNetImpl::UNetImpl(const UNetOptions& opts) : opts_(opts) {
  require(opts.levels >= 1, "U-Net needs at least one level");
  require(opts.base_channels >= 1 && opts.in_channels >= 1, "U-Net channel counts must be >= 1");
  const auto rank = opts.rank;
  auto conv = [&](std::int64_t in, std::int64_t out, std::int64_t stride) {
    return ConvNd(ConvOptions{in, out, 3, stride, rank, true});
  };
  for (std::int64_t l = 0; l < opts.levels; ++l) {
    const auto c = level_channels(opts, l);
    if (l > 0) {
      down_.push_back(register_module("down" + std::to_string(l),
                                      conv(level_channels(opts, l - 1), c, 2)));
    }
    enc_.push_back(register_module("enc" + std::to_string(l),
                                   conv(l == 0 ? opts.in_channels : c, c, 1)));
  }
  for (std::int64_t l = opts.levels - 2; l >= 0; --l) {
    const auto c = level_channels(opts, l);
    dec_.push_back(register_module("dec" + std::to_string(l),
                                   conv(level_channels(opts, l + 1) + c, c, 1)));
  }
  fuse_.push_back(register_module("fuse", conv(level_channels(opts, 0), level_channels(opts, 0), 1)));
}

std::int64_t UNetImpl::bottleneck_channels() const {
  return level_channels(opts_, opts_.levels - 1);
}

torch::Tensor UNetImpl::block(const torch::Tensor& x, ConvNd& conv) {
  auto y = conv->forward(x);
  if (opts_.instance_norm && y.numel() / (y.size(0) * y.size(1)) > 1) {
    y = torch::instance_norm(y, {}, {}, {}, {}, true, 0.1, 1e-5, false);
  }
  return torch::leaky_relu(y, opts_.leaky_slope);
}

torch::Tensor UNetImpl::forward(const torch::Tensor& x) {
  require(x.dim() == opts_.rank + 2, "U-Net input rank mismatch");
  const std::int64_t factor = std::int64_t{1} << (opts_.levels - 1);
  for (std::int64_t d = 0; d < opts_.rank; ++d) {
    require(x.size(d + 2) % factor == 0,
            "U-Net input sides must be divisible by " + std::to_string(factor));
  }
  std::vector<torch::Tensor> skips;
  auto h = block(x, enc_[0]);
  skips.push_back(h);
  for (std::size_t l = 1; l < enc_.size(); ++l) {
    h = block(h, down_[l - 1]);
    h = block(h, enc_[l]);
    skips.push_back(h);
  }
  bottleneck_ = h;
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    const auto& skip = skips[skips.size() - 2 - i];
    h = block(torch::cat({upsample2(h, opts_.rank), skip}, 1), dec_[i]);
  }
  return block(h, fuse_[0]);
}

RegistrationNetImpl::RegistrationNetImpl(const UNetOptions& opts) : opts_(opts) {
  auto body_opts = opts;
  body_opts.in_channels = 2;
  opts_ = body_opts;
  body_ = register_module("body", UNet(body_opts));
  head_ = register_module(
      "head", ConvNd(ConvOptions{opts.base_channels, opts.rank, 3, 1, opts.rank, true}));
  torch::NoGradGuard no_grad;
  head_->weight.zero_();
  head_->bias.zero_();
}

warp::VelocityField RegistrationNetImpl::forward(const torch::Tensor& source,
                                                 const torch::Tensor& target) {
  require(source.sizes() == target.sizes(), "registration inputs differ in shape");
  require(source.size(1) == 1, "registration inputs must be single-channel");
  return {head_->forward(body_->forward(torch::cat({source, target}, 1)))};
}

SegmenterNetImpl::SegmenterNetImpl(const UNetOptions& opts, std::int64_t num_classes)
    : opts_(opts), num_classes_(num_classes) {
  require(num_classes >= 2, "segmenter needs at least two classes");
  body_ = register_module("body", UNet(opts));
  head_ = register_module(
      "head", ConvNd(ConvOptions{opts.base_channels, num_classes, 1, 1, opts.rank, true}));
}

torch::Tensor SegmenterNetImpl::logits(const torch::Tensor& x) {
  return head_->forward(body_->forward(x));
}

torch::Tensor SegmenterNetImpl::forward(const torch::Tensor& x) { return logits(x).softmax(1); }

nlohmann::json DiscriminatorOptions::to_json() const {
  return {{"in_channels", in_channels}, {"base_channels", base_channels}, {"blocks", blocks},
          {"rank", rank},               {"patch", patch},                 {"leaky_slope", leaky_slope}};
}

DiscriminatorOptions DiscriminatorOptions::from_json(const nlohmann::json& j) {
  DiscriminatorOptions o;
  o.in_channels = j.value("in_channels", o.in_channels);
  o.base_channels = j.value("base_channels", o.base_channels);
  o.blocks = j.value("blocks", o.blocks);
  o.rank = j.value("rank", o.rank);
  o.patch = j.value("patch", o.patch);
  o.leaky_slope = j.value("leaky_slope", o.leaky_slope);
  return o;
}

DiscriminatorNetImpl::DiscriminatorNetImpl(const DiscriminatorOptions& opts) : opts_(opts) {
  require(opts.blocks >= 1, "discriminator needs at least one block");
  std::int64_t in = opts.in_channels;
  for (std::int64_t b = 0; b < opts.blocks; ++b) {
    const auto out = opts.base_channels * (std::int64_t{1} << std::min<std::int64_t>(b, 3));
    convs_.push_back(register_module("conv" + std::to_string(b),
                                     ConvNd(ConvOptions{in, out, 3, 2, opts.rank, true})));
    in = out;
  }
  head_ = register_module("head", ConvNd(ConvOptions{in, 1, 3, 1, opts.rank, true}));
}

torch::Tensor DiscriminatorNetImpl::forward(const torch::Tensor& x) {
  require(x.dim() == opts_.rank + 2, "discriminator input rank mismatch");
  auto h = x;
  for (auto& c : convs_) h = torch::leaky_relu(c->forward(h), opts_.leaky_slope);
  auto logits = head_->forward(h).squeeze(1);  // [N, *S']
  if (opts_.patch) return logits;
  return logits.flatten(1).mean(1);
}

DomainClassifierImpl::DomainClassifierImpl(std::int64_t in_channels, std::int64_t hidden) {
  fc1_ = register_module("fc1", torch::nn::Linear(in_channels, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, 1));
}

torch::Tensor DomainClassifierImpl::forward(const torch::Tensor& features) {
  auto pooled = features.flatten(2).mean(2);
  return fc2_->forward(torch::leaky_relu(fc1_->forward(pooled), 0.2)).squeeze(1);
}

Freeze::Freeze(torch::nn::Module& m) {
  for (auto& p : m.parameters()) {
    saved_.emplace_back(p, p.requires_grad());
    p.set_requires_grad(false);
  }
}

Freeze::~Freeze() {
  for (auto& [p, flag] : saved_) p.set_requires_grad(flag);
}

std::string parameter_hash(const torch::nn::Module& m) {
  std::string bytes;
  for (const auto& p : m.parameters()) {
    auto t = p.detach().to(torch::kFloat32).contiguous();
    bytes.append(static_cast<const char*>(t.data_ptr()), t.numel() * sizeof(float));
  }
  return io::sha256_hex(bytes);
}

void save_checkpoint(const torch::nn::Module& m, const std::filesystem::path& stem,
                     const nlohmann::json& meta) {
  torch::serialize::OutputArchive archive;
  for (const auto& item : m.named_parameters()) archive.write(item.key(), item.value().detach());
  std::ostringstream buffer;
  archive.save_to(buffer);
  auto pt = stem;
  pt += ".pt";
  io::write_atomic(pt, buffer.str());
  auto js = stem;
  js += ".json";
  auto full = meta;
  full["schema_version"] = 1;
  full["parameter_hash"] = parameter_hash(m);
  io::write_json(js, full);
}

nlohmann::json load_checkpoint(torch::nn::Module& m, const std::filesystem::path& stem) {
  auto pt = stem;
  pt += ".pt";
  auto js = stem;
  js += ".json";
  if (!std::filesystem::exists(pt) || !std::filesystem::exists(js)) {
    throw MissingInputError("checkpoint not found: " + stem.string());
  }
  torch::serialize::InputArchive archive;
  archive.load_from(pt.string());
  torch::NoGradGuard no_grad;
  for (auto& item : m.named_parameters()) {
    torch::Tensor t;
    archive.read(item.key(), t);
    require(t.sizes() == item.value().sizes(), "checkpoint shape mismatch for " + item.key());
    item.value().copy_(t);
  }
  return io::read_json(js);
}

torch::Tensor as_batch(const torch::Tensor& img) { return img.unsqueeze(0).unsqueeze(0); }

}  // namespace dirda::models
