#include "nullswap/netblocks.hpp"

#include <stdexcept>

namespace nullswap {

namespace F = torch::nn::functional;

void check_image_tensor(const torch::Tensor& image, const std::string& what) {
  if (!image.defined()) throw std::invalid_argument(what + ": undefined tensor");
  if (image.dim() != 4 || image.size(1) != 3) {
    throw std::invalid_argument(what + ": expected [B, 3, H, W], got " + std::to_string(image.dim()) + "-d tensor");
  }
  if (image.size(2) % 4 != 0 || image.size(3) % 4 != 0) {
    throw std::invalid_argument(what + ": height and width must be divisible by 4, got " +
                                std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)));
  }
  torch::NoGradGuard guard;
  if (!torch::isfinite(image).all().item<bool>()) throw std::invalid_argument(what + ": non-finite pixel values");
  if (image.numel() > 0 && image.abs().max().item<double>() > 1.0 + 1e-6) {
    throw std::invalid_argument(what + ": pixel values outside [-1, 1]");
  }
}

void GeneratorConfig::validate() const {
  if (id_blocks < 1 || perturb_blocks < 1 || feature_blocks < 1 || discriminator_blocks < 1) {
    throw std::invalid_argument("generator config: block counts must be >= 1");
  }
  if (base_channels < 4 || base_channels % 4 != 0) {
    // even is required by the SE reduction; the /4 width at full resolution needs a multiple of 4
    throw std::invalid_argument("generator config: base_channels must be a positive multiple of 4");
  }
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"id_blocks", c.id_blocks},
       {"perturb_blocks", c.perturb_blocks},
       {"feature_blocks", c.feature_blocks},
       {"base_channels", c.base_channels},
       {"discriminator_blocks", c.discriminator_blocks}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  j.at("id_blocks").get_to(c.id_blocks);
  j.at("perturb_blocks").get_to(c.perturb_blocks);
  j.at("feature_blocks").get_to(c.feature_blocks);
  j.at("base_channels").get_to(c.base_channels);
  j.at("discriminator_blocks").get_to(c.discriminator_blocks);
}

ConvBlockImpl::ConvBlockImpl(int64_t in, int64_t out, int64_t stride, int64_t kernel) {
  conv = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(false)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return torch::relu(bn(conv(x))); }

DeConvBlockImpl::DeConvBlockImpl(int64_t in, int64_t out) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1).bias(false)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor DeConvBlockImpl::forward(const torch::Tensor& x) {
  auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
  return torch::relu(bn(conv(up)));
}

SEResBlockImpl::SEResBlockImpl(int64_t in, int64_t out, int64_t stride_)
    : in_channels(in), out_channels(out), stride(stride_) {
  if (out % 2 != 0) throw std::invalid_argument("SEResBlock: output channels must be even");
  const int64_t mid = out / 2;
  reduce = register_module("reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, mid, 1).bias(false)));
  bn_reduce = register_module("bn_reduce", torch::nn::BatchNorm2d(mid));
  spatial = register_module(
      "spatial", torch::nn::Conv2d(torch::nn::Conv2dOptions(mid, mid, 3).stride(stride).padding(1).bias(false)));
  bn_spatial = register_module("bn_spatial", torch::nn::BatchNorm2d(mid));
  expand = register_module("expand", torch::nn::Conv2d(torch::nn::Conv2dOptions(mid, out, 1).bias(false)));
  bn_expand = register_module("bn_expand", torch::nn::BatchNorm2d(out));
  squeeze = register_module("squeeze", torch::nn::Linear(out, out / 2));
  excite = register_module("excite", torch::nn::Linear(out / 2, out));
  if (in != out || stride != 1) {
    proj = register_module("proj",
                           torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    bn_proj = register_module("bn_proj", torch::nn::BatchNorm2d(out));
  }
}

torch::Tensor SEResBlockImpl::bottleneck(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != in_channels) {
    throw std::invalid_argument("SEResBlock: expected " + std::to_string(in_channels) + " input channels, got " +
                                (x.dim() == 4 ? std::to_string(x.size(1)) : std::string("a non-4d tensor")));
  }
  auto h = torch::relu(bn_reduce(reduce(x)));
  h = torch::relu(bn_spatial(spatial(h)));
  return torch::relu(bn_expand(expand(h)));
}

torch::Tensor SEResBlockImpl::gate(const torch::Tensor& b) {
  auto s = b.mean({2, 3});
  s = torch::sigmoid(excite(torch::relu(squeeze(s))));
  return s.view({b.size(0), b.size(1), 1, 1});
}

torch::Tensor SEResBlockImpl::shortcut(const torch::Tensor& x) { return proj ? bn_proj(proj(x)) : x; }

torch::Tensor SEResBlockImpl::forward(const torch::Tensor& x) {
  auto b = bottleneck(x);
  return b * gate(b) + shortcut(x);
}

IdExtractionImpl::IdExtractionImpl(const GeneratorConfig& c) {
  stem = register_module("stem", ConvBlock(3, c.base_channels));
  blocks = register_module("blocks", torch::nn::Sequential());
  const int64_t strided = c.id_blocks > 1 ? 1 : 0;
  for (int64_t i = 0; i < c.id_blocks; ++i) {
    blocks->push_back(SEResBlock(c.base_channels, c.base_channels, i == strided ? 2 : 1));
  }
}

torch::Tensor IdExtractionImpl::forward(const torch::Tensor& image) {
  return blocks->forward(F::max_pool2d(stem(image), F::MaxPool2dFuncOptions(2)));
}

torch::Tensor adaptive_noise(torch::IntArrayRef shape, const NoiseParams& p, std::optional<at::Generator> rng) {
  auto opts = torch::TensorOptions().dtype(p.noise_alpha.dtype()).device(p.noise_alpha.device());
  torch::Tensor n = rng ? torch::randn(shape, *rng, opts) : torch::randn(shape, opts);
  auto eta = p.eta.view({1, -1, 1, 1});
  return p.noise_beta * (p.noise_alpha * n + eta);
}

PerturbationBlockImpl::PerturbationBlockImpl(const GeneratorConfig& c) {
  refine = register_module("refine", ConvBlock(c.base_channels, c.base_channels));
  blocks = register_module("blocks", torch::nn::Sequential());
  for (int64_t i = 0; i < c.perturb_blocks; ++i) blocks->push_back(SEResBlock(c.base_channels, c.base_channels));
  noise_alpha = register_parameter("noise_alpha", torch::ones({}));
  noise_beta = register_parameter("noise_beta", torch::full({}, 0.1));
  eta = register_parameter("eta", torch::zeros({c.base_channels}));
}

torch::Tensor PerturbationBlockImpl::deterministic_part(const torch::Tensor& identity_features) {
  return blocks->forward(refine(identity_features));
}

torch::Tensor PerturbationBlockImpl::forward(const torch::Tensor& identity_features, NoiseMode mode,
                                             std::optional<at::Generator> rng) {
  auto p = deterministic_part(identity_features);
  if (mode == NoiseMode::Deterministic) return p + noise_beta * eta.view({1, -1, 1, 1});
  return p + adaptive_noise(p.sizes(), noise_params(), std::move(rng));
}

FeatureBlockImpl::FeatureBlockImpl(const GeneratorConfig& c) {
  conv1 = register_module("conv1", ConvBlock(3, c.base_channels / 2, 2));
  conv2 = register_module("conv2", ConvBlock(c.base_channels / 2, c.base_channels, 2));
  conv3 = register_module("conv3", ConvBlock(c.base_channels, c.base_channels, 1));
  blocks = register_module("blocks", torch::nn::Sequential());
  for (int64_t i = 0; i < c.feature_blocks; ++i) blocks->push_back(SEResBlock(c.base_channels, c.base_channels));
}

torch::Tensor FeatureBlockImpl::forward(const torch::Tensor& image) {
  return blocks->forward(conv3(conv2(conv1(image))));
}

namespace {
constexpr double kTanhEdge = 1.0 - 1e-3;
}  // namespace

CloakingBlockImpl::CloakingBlockImpl(const GeneratorConfig& c) {
  const int64_t b = c.base_channels;
  cloak_gamma = register_parameter("cloak_gamma", torch::ones({}));
  fuse = register_module("fuse", SEResBlock(2 * b, b));
  up1 = register_module("up1", DeConvBlock(b, b / 2));
  mid = register_module("mid", ConvBlock(b / 2, b / 2));
  up2 = register_module("up2", DeConvBlock(b / 2, b / 4));
  out1 = register_module("out1", ConvBlock(b / 4 + 3, b / 4));
  out2 = register_module("out2", ConvBlock(b / 4, b / 4));
  out3 = register_module("out3", torch::nn::Conv2d(torch::nn::Conv2dOptions(b / 4, 3, 3).padding(1)));
  // start close to the identity mapping; see forward()
  torch::NoGradGuard guard;
  out3->weight.mul_(0.1);
  out3->bias.zero_();
}

torch::Tensor CloakingBlockImpl::forward(const torch::Tensor& shallow, const torch::Tensor& perturbation,
                                         const torch::Tensor& image) {
  if (shallow.sizes() != perturbation.sizes()) {
    throw std::invalid_argument("cloaking block: feature and perturbation maps are not aligned");
  }
  if (image.size(2) != 4 * shallow.size(2) || image.size(3) != 4 * shallow.size(3)) {
    throw std::invalid_argument("cloaking block: image is not 4x the feature resolution");
  }
  auto h = torch::cat({shallow, cloak_gamma * perturbation}, 1);
  h = up2(mid(up1(fuse(h))));
  h = torch::cat({h, image}, 1);
  // The last conv is a residual in tanh space, so a zero response gives back
  // the input. Pixels at exactly +-1 are pulled in slightly to keep atanh finite.
  const auto base = torch::atanh(image.clamp(-kTanhEdge, kTanhEdge));
  return torch::tanh(base + out3(out2(out1(h))));
}

GeneratorImpl::GeneratorImpl(const GeneratorConfig& c) : config(c) {
  config.validate();
  id_extraction = register_module("id_extraction", IdExtraction(c));
  perturbation = register_module("perturbation", PerturbationBlock(c));
  features = register_module("features", FeatureBlock(c));
  cloaking = register_module("cloaking", CloakingBlock(c));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& image, NoiseMode mode, std::optional<at::Generator> rng) {
  if (image.dim() != 4 || image.size(1) != 3 || image.size(2) % 4 != 0 || image.size(3) % 4 != 0) {
    throw std::invalid_argument("generator: expected [B, 3, H, W] with H, W divisible by 4");
  }
  auto pert = perturbation(id_extraction(image), mode, std::move(rng));
  return cloaking(features(image), pert, image);
}

DiscriminatorImpl::DiscriminatorImpl(const GeneratorConfig& c) {
  c.validate();
  body = register_module("body", torch::nn::Sequential());
  int64_t in = 3;
  int64_t out = c.base_channels / 2;
  for (int64_t i = 0; i < c.discriminator_blocks; ++i) {
    body->push_back(ConvBlock(in, out, 2));
    in = out;
    out = std::min(out * 2, 4 * c.base_channels);
  }
  head = register_module("head", torch::nn::Linear(in, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& image) {
  return head(body->forward(image).mean({2, 3})).squeeze(1);
}

}  // namespace nullswap
