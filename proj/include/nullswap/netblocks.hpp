#pragma once

// Identity-cloaking generator and its discriminator.
//
//   image -> IdExtraction -> PerturbationBlock (+ adaptive noise) --+
//   image -> FeatureBlock -----------------------------------------> CloakingBlock -> cloaked image
//
// Both branches work at 1/4 of the input resolution so their outputs can be
// concatenated. No layer depends on a fixed input size.

#include <cstdint>
#include <optional>
#include <string>

#include <torch/torch.h>

#include <json.hpp>

namespace nullswap {

/// Checks batch x 3 x H x W, H and W divisible by 4, finite values in [-1, 1].
/// Throws std::invalid_argument with `what` in the message.
void check_image_tensor(const torch::Tensor& image, const std::string& what = "image");

struct GeneratorConfig {
  int64_t id_blocks = 4;          // L
  int64_t perturb_blocks = 3;     // M
  int64_t feature_blocks = 5;     // N
  int64_t base_channels = 64;
  int64_t discriminator_blocks = 5;

  void validate() const;
  static GeneratorConfig toy() { return GeneratorConfig{4, 3, 5, 32, 5}; }
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

enum class NoiseMode {
  Train,          // fresh noise every forward pass
  Stochastic,     // same as Train; intended for inference behind a flag
  Deterministic,  // no random term, only noise_beta * eta
};

// conv -> batch norm -> ReLU
struct ConvBlockImpl : torch::nn::Module {
  ConvBlockImpl(int64_t in, int64_t out, int64_t stride = 1, int64_t kernel = 3);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(ConvBlock);

// 2x nearest upsample -> conv -> batch norm -> ReLU
struct DeConvBlockImpl : torch::nn::Module {
  DeConvBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(DeConvBlock);

// Residual bottleneck (1x1 reduce, 3x3, 1x1 expand; each BN + ReLU) with
// squeeze-and-excitation gating on the bottleneck output, added to the
// (projected when needed) input. No activation after the addition.
struct SEResBlockImpl : torch::nn::Module {
  SEResBlockImpl(int64_t in, int64_t out, int64_t stride = 1);

  torch::Tensor forward(const torch::Tensor& x);
  /// Bottleneck path without the gate.
  torch::Tensor bottleneck(const torch::Tensor& x);
  /// Per-channel gate in (0, 1), shape [B, C, 1, 1].
  torch::Tensor gate(const torch::Tensor& bottleneck_out);
  torch::Tensor shortcut(const torch::Tensor& x);

  int64_t in_channels, out_channels, stride;
  torch::nn::Conv2d reduce{nullptr}, spatial{nullptr}, expand{nullptr};
  torch::nn::BatchNorm2d bn_reduce{nullptr}, bn_spatial{nullptr}, bn_expand{nullptr};
  torch::nn::Linear squeeze{nullptr}, excite{nullptr};
  torch::nn::Conv2d proj{nullptr};
  torch::nn::BatchNorm2d bn_proj{nullptr};
};
TORCH_MODULE(SEResBlock);

struct IdExtractionImpl : torch::nn::Module {
  explicit IdExtractionImpl(const GeneratorConfig& config);
  torch::Tensor forward(const torch::Tensor& image);

  ConvBlock stem{nullptr};
  torch::nn::Sequential blocks{nullptr};
};
TORCH_MODULE(IdExtraction);

/// Learnable parameters of the adaptive noise term
/// noise = noise_beta * (noise_alpha * n + eta), n ~ N(0, 1).
struct NoiseParams {
  torch::Tensor noise_alpha;  // scalar
  torch::Tensor noise_beta;   // scalar
  torch::Tensor eta;          // [C], broadcast over H, W
};

/// Samples n from `rng` when given, otherwise from the global torch generator.
torch::Tensor adaptive_noise(torch::IntArrayRef shape, const NoiseParams& params,
                             std::optional<at::Generator> rng = std::nullopt);

struct PerturbationBlockImpl : torch::nn::Module {
  explicit PerturbationBlockImpl(const GeneratorConfig& config);

  torch::Tensor forward(const torch::Tensor& identity_features, NoiseMode mode,
                        std::optional<at::Generator> rng = std::nullopt);
  /// Perturbation before any noise is added.
  torch::Tensor deterministic_part(const torch::Tensor& identity_features);
  NoiseParams noise_params() const { return {noise_alpha, noise_beta, eta}; }

  ConvBlock refine{nullptr};
  torch::nn::Sequential blocks{nullptr};
  torch::Tensor noise_alpha, noise_beta, eta;
};
TORCH_MODULE(PerturbationBlock);

struct FeatureBlockImpl : torch::nn::Module {
  explicit FeatureBlockImpl(const GeneratorConfig& config);
  torch::Tensor forward(const torch::Tensor& image);

  ConvBlock conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::Sequential blocks{nullptr};
};
TORCH_MODULE(FeatureBlock);

struct CloakingBlockImpl : torch::nn::Module {
  explicit CloakingBlockImpl(const GeneratorConfig& config);
  torch::Tensor forward(const torch::Tensor& shallow_features, const torch::Tensor& perturbation,
                        const torch::Tensor& image);

  torch::Tensor cloak_gamma;
  SEResBlock fuse{nullptr};
  DeConvBlock up1{nullptr};
  ConvBlock mid{nullptr};
  DeConvBlock up2{nullptr};
  ConvBlock out1{nullptr}, out2{nullptr};
  torch::nn::Conv2d out3{nullptr};
};
TORCH_MODULE(CloakingBlock);

struct GeneratorImpl : torch::nn::Module {
  explicit GeneratorImpl(const GeneratorConfig& config);

  torch::Tensor forward(const torch::Tensor& image, NoiseMode mode = NoiseMode::Deterministic,
                        std::optional<at::Generator> rng = std::nullopt);

  GeneratorConfig config;
  IdExtraction id_extraction{nullptr};
  PerturbationBlock perturbation{nullptr};
  FeatureBlock features{nullptr};
  CloakingBlock cloaking{nullptr};
};
TORCH_MODULE(Generator);

// Strided ConvBlocks, global average pool, linear head -> one raw logit per image.
struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(const GeneratorConfig& config);
  torch::Tensor forward(const torch::Tensor& image);

  torch::nn::Sequential body{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Discriminator);

}  // namespace nullswap
