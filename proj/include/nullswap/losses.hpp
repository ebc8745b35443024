#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "nullswap/data.hpp"
#include "nullswap/embedders.hpp"
#include "nullswap/netblocks.hpp"

namespace nullswap {

struct LossCoefficients {
  double lambda_id = 0.08;
  double lambda_mse = 1.8;
  double lambda_lpips = 1.2;
  double lambda_d = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossCoefficients& c);
void from_json(const nlohmann::json& j, LossCoefficients& c);

/// Mean squared error over batch, channels and pixels.
torch::Tensor reconstruction_loss(const torch::Tensor& clean, const torch::Tensor& cloaked);

// Frozen convolutional feature extractor for the perceptual distance. Every
// post-activation stage is a tap.
struct PerceptualNetImpl : torch::nn::Module {
  PerceptualNetImpl();
  std::vector<torch::Tensor> activations(const torch::Tensor& image);

  std::vector<torch::nn::Sequential> stages;
};
TORCH_MODULE(PerceptualNet);

/// Briefly trains the extractor as an identity classifier on `train`, then
/// freezes it.
PerceptualNet train_perceptual_net(const ImageSet& train, std::uint64_t seed, int64_t epochs = 4);
void save_perceptual_net(const PerceptualNet& net, const std::filesystem::path& path);
PerceptualNet load_perceptual_net(const std::filesystem::path& path);
void freeze(PerceptualNet& net);

/// Sum over taps of the spatially averaged squared distance between
/// channel-normalized activations, averaged over the batch.
torch::Tensor perceptual_loss(const torch::Tensor& clean, const torch::Tensor& cloaked, PerceptualNet& net);

/// -E[log sigmoid(real)] - E[log(1 - sigmoid(fake))], via softplus.
torch::Tensor discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor discriminator_loss(Discriminator& d, const torch::Tensor& clean, const torch::Tensor& cloaked);
/// -E[log sigmoid(fake)]
torch::Tensor adversarial_loss(const torch::Tensor& fake_logits);
torch::Tensor adversarial_loss(Discriminator& d, const torch::Tensor& cloaked);

/// Batch-mean cosine between embed(clean) and embed(cloaked), one scalar per
/// embedder. Clean embeddings are taken from `clean_embeddings` when given
/// (one [B, dim] tensor per embedder), otherwise computed without gradient.
std::vector<torch::Tensor> identity_losses(const std::vector<std::shared_ptr<FaceEmbedder>>& embedders,
                                           const torch::Tensor& clean, const torch::Tensor& cloaked,
                                           const std::vector<torch::Tensor>& clean_embeddings = {});

struct LossComponents {
  torch::Tensor identity;
  torch::Tensor mse;
  torch::Tensor perceptual;
  torch::Tensor adversarial;
};

torch::Tensor total_loss(const LossComponents& components, const LossCoefficients& coefficients);
double total_loss(double identity, double mse, double perceptual, double adversarial,
                  const LossCoefficients& coefficients);

}  // namespace nullswap
