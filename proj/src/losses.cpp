#include "nullswap/losses.hpp"

#include <numeric>
#include <random>
#include <stdexcept>

#include "nullswap/checkpoint.hpp"

namespace nullswap {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

void LossCoefficients::validate() const {
  for (double v : {lambda_id, lambda_mse, lambda_lpips, lambda_d}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("loss coefficients must be finite and >= 0");
  }
}

void to_json(nlohmann::json& j, const LossCoefficients& c) {
  j = {{"lambda_id", c.lambda_id}, {"lambda_mse", c.lambda_mse}, {"lambda_lpips", c.lambda_lpips},
       {"lambda_d", c.lambda_d}};
}

void from_json(const nlohmann::json& j, LossCoefficients& c) {
  j.at("lambda_id").get_to(c.lambda_id);
  j.at("lambda_mse").get_to(c.lambda_mse);
  j.at("lambda_lpips").get_to(c.lambda_lpips);
  j.at("lambda_d").get_to(c.lambda_d);
}

torch::Tensor reconstruction_loss(const torch::Tensor& clean, const torch::Tensor& cloaked) {
  if (clean.sizes() != cloaked.sizes()) throw std::invalid_argument("reconstruction_loss: shape mismatch");
  return (clean - cloaked).pow(2).mean();
}

PerceptualNetImpl::PerceptualNetImpl() {
  auto conv = [](int64_t in, int64_t out) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1));
  };
  torch::nn::Sequential s1(conv(3, 16), torch::nn::ReLU(), conv(16, 16), torch::nn::ReLU());
  torch::nn::Sequential s2(torch::nn::MaxPool2d(2), conv(16, 32), torch::nn::ReLU());
  torch::nn::Sequential s3(torch::nn::MaxPool2d(2), conv(32, 64), torch::nn::ReLU());
  stages = {register_module("stage1", s1), register_module("stage2", s2), register_module("stage3", s3)};
}

std::vector<torch::Tensor> PerceptualNetImpl::activations(const torch::Tensor& image) {
  std::vector<torch::Tensor> out;
  auto h = image;
  for (auto& s : stages) {
    h = s->forward(h);
    out.push_back(h);
  }
  return out;
}

void freeze(PerceptualNet& net) {
  for (auto& p : net->parameters()) p.set_requires_grad(false);
  net->eval();
}

PerceptualNet train_perceptual_net(const ImageSet& train, std::uint64_t seed, int64_t epochs) {
  if (train.size() < 2) throw std::invalid_argument("perceptual net training needs at least two images");
  torch::manual_seed(seed);
  PerceptualNet net;
  const int64_t classes = *std::max_element(train.labels.begin(), train.labels.end()) + 1;
  torch::nn::Linear head(64, classes);
  std::vector<torch::Tensor> params = net->parameters();
  for (const auto& p : head->parameters()) params.push_back(p);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(1e-3));
  auto labels = torch::tensor(train.labels, torch::kInt64);
  std::mt19937_64 rng(seed);
  std::vector<int64_t> order(static_cast<std::size_t>(train.size()));
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t start = 0; start < train.size(); start += 32) {
      const int64_t end = std::min(train.size(), start + 32);
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + end), torch::kInt64);
      opt.zero_grad();
      auto feats = net->activations(train.images.index_select(0, idx)).back().mean({2, 3});
      auto loss = F::cross_entropy(head(feats), labels.index_select(0, idx));
      loss.backward();
      opt.step();
    }
  }
  freeze(net);
  return net;
}

void save_perceptual_net(const PerceptualNet& net, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  net->save(archive);
  archive.save_to(path.string());
  write_sidecar(path, "perceptual_net", {{"taps", net->stages.size()}});
}

PerceptualNet load_perceptual_net(const fs::path& path) {
  read_sidecar(path, "perceptual_net");
  PerceptualNet net;
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    net->load(archive);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load perceptual net from " + path.string() + ": " + e.what_without_backtrace());
  }
  freeze(net);
  return net;
}

torch::Tensor perceptual_loss(const torch::Tensor& clean, const torch::Tensor& cloaked, PerceptualNet& net) {
  if (net.is_empty()) throw std::invalid_argument("perceptual_loss: perceptual net not loaded");
  if (clean.sizes() != cloaked.sizes()) throw std::invalid_argument("perceptual_loss: shape mismatch");
  const auto fa = net->activations(clean);
  const auto fb = net->activations(cloaked);
  auto total = torch::zeros({}, cloaked.options());
  const auto norm = F::NormalizeFuncOptions().dim(1).eps(1e-10);
  for (std::size_t l = 0; l < fa.size(); ++l) {
    auto d = F::normalize(fa[l], norm) - F::normalize(fb[l], norm);
    total = total + d.pow(2).sum(1).mean();
  }
  return total;
}

torch::Tensor discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean();
}

torch::Tensor discriminator_loss(Discriminator& d, const torch::Tensor& clean, const torch::Tensor& cloaked) {
  return discriminator_loss(d(clean), d(cloaked));
}

torch::Tensor adversarial_loss(const torch::Tensor& fake_logits) { return F::softplus(-fake_logits).mean(); }

torch::Tensor adversarial_loss(Discriminator& d, const torch::Tensor& cloaked) { return adversarial_loss(d(cloaked)); }

std::vector<torch::Tensor> identity_losses(const std::vector<std::shared_ptr<FaceEmbedder>>& embedders,
                                           const torch::Tensor& clean, const torch::Tensor& cloaked,
                                           const std::vector<torch::Tensor>& clean_embeddings) {
  if (embedders.empty()) throw std::invalid_argument("identity_losses: no embedders");
  if (!clean_embeddings.empty() && clean_embeddings.size() != embedders.size()) {
    throw std::invalid_argument("identity_losses: one cached clean embedding tensor per embedder is required");
  }
  std::vector<torch::Tensor> out;
  for (std::size_t i = 0; i < embedders.size(); ++i) {
    torch::Tensor reference;
    if (!clean_embeddings.empty()) {
      reference = clean_embeddings[i];
    } else {
      torch::NoGradGuard guard;
      reference = embedders[i]->embed(clean);
    }
    out.push_back(cosine_rows(reference, embedders[i]->embed(cloaked)).mean());
  }
  return out;
}

torch::Tensor total_loss(const LossComponents& c, const LossCoefficients& k) {
  return k.lambda_id * c.identity + k.lambda_mse * c.mse + k.lambda_lpips * c.perceptual + k.lambda_d * c.adversarial;
}

double total_loss(double identity, double mse, double perceptual, double adversarial, const LossCoefficients& k) {
  return k.lambda_id * identity + k.lambda_mse * mse + k.lambda_lpips * perceptual + k.lambda_d * adversarial;
}

}  // namespace nullswap
