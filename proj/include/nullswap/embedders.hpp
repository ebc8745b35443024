#pragma once

// Face embedders: image batch -> unit-norm identity embeddings.
//
// Toy embedders are small identity classifiers trained on a labelled dataset;
// their embedding is the normalized pre-logit feature. Pretrained models are
// wrapped through TorchScriptEmbedder when the user supplies weights.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "nullswap/data.hpp"

namespace nullswap {

class EmbedderNotLoaded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmbedderTrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input recipe applied to [-1, 1] images before the network sees them:
/// optional bilinear resize, then (x01 - mean) / std per channel.
struct Preprocess {
  int64_t input_size = 0;  // 0 keeps the incoming size
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.5, 0.5, 0.5};

  torch::Tensor apply(const torch::Tensor& image) const;
};

class FaceEmbedder {
 public:
  virtual ~FaceEmbedder() = default;

  const std::string& name() const { return name_; }
  const Preprocess& preprocess() const { return preprocess_; }
  virtual int64_t dim() const = 0;
  virtual bool loaded() const = 0;
  /// True when no parameter requires a gradient.
  bool frozen() const;
  virtual std::vector<torch::Tensor> parameters() const = 0;

  /// [B, 3, H, W] in [-1, 1] -> [B, dim] with unit rows. Gradients flow to the
  /// input image; throws EmbedderNotLoaded when weights are absent.
  torch::Tensor embed(const torch::Tensor& image) const;

 protected:
  FaceEmbedder(std::string name, Preprocess preprocess)
      : name_(std::move(name)), preprocess_(preprocess) {}
  virtual torch::Tensor features(const torch::Tensor& preprocessed) const = 0;

 private:
  std::string name_;
  Preprocess preprocess_;
};

/// Standard cosine similarity; throws std::invalid_argument on a zero vector
/// or a length mismatch.
double cosine_similarity(std::span<const float> a, std::span<const float> b);
/// Row-wise cosine of two [B, D] tensors -> [B]; differentiable.
torch::Tensor cosine_rows(const torch::Tensor& a, const torch::Tensor& b);

enum class ToyArch { A, B, C };
ToyArch parse_toy_arch(const std::string& s);
std::string to_string(ToyArch arch);

// Every toy net standardizes each input image (zero mean, unit variance).
// A: 4 conv stages with max pooling, global average pool.
// B: 5 conv stages with strided convolutions, global max pool.
// C: 3 double-conv stages with LeakyReLU and average pooling, avg+max pool.
struct ToyNetImpl : torch::nn::Module {
  ToyNetImpl(ToyArch arch, int64_t dim, int64_t num_classes);

  torch::Tensor embedding(const torch::Tensor& x);
  /// Cosine classifier logits scale * (cos - margin * onehot).
  torch::Tensor logits(const torch::Tensor& x, const torch::Tensor& labels = {}, double margin = 0.0);

  ToyArch arch;
  torch::nn::Sequential body{nullptr};
  torch::nn::Linear project{nullptr};
  torch::Tensor class_weights;
  double scale = 16.0;
};
TORCH_MODULE(ToyNet);

struct ToyEmbedderSpec {
  ToyArch arch = ToyArch::A;
  int64_t dim = 64;
  int64_t epochs = 20;
  int64_t batch_size = 32;
  double learning_rate = 2e-3;
  double margin = 0.2;
  double target_top1 = 0.9;
  std::uint64_t seed = 1;
};

class ToyEmbedder : public FaceEmbedder {
 public:
  ToyEmbedder(std::string name, ToyArch arch, int64_t dim, int64_t num_classes);

  int64_t dim() const override { return dim_; }
  bool loaded() const override { return static_cast<bool>(net_); }
  std::vector<torch::Tensor> parameters() const override;
  ToyArch arch() const { return arch_; }
  int64_t num_classes() const { return num_classes_; }
  double validation_top1() const { return val_top1_; }
  int64_t parameter_count() const;

  ToyNet& net() { return net_; }
  /// Stops gradient tracking on all parameters and switches to eval mode.
  void freeze();
  void set_validation_top1(double v) { val_top1_ = v; }

  void save(const std::filesystem::path& path) const;
  static std::shared_ptr<ToyEmbedder> load(const std::filesystem::path& path);

 protected:
  torch::Tensor features(const torch::Tensor& preprocessed) const override;

 private:
  ToyArch arch_;
  int64_t dim_;
  int64_t num_classes_;
  double val_top1_ = 0.0;
  ToyNet net_;
};

/// Trains an identity classifier on `train`, measures classifier top-1 on
/// `val`, and returns the frozen embedder. Throws EmbedderTrainingError when
/// the target accuracy is not reached and std::invalid_argument for fewer
/// than two identities.
std::shared_ptr<ToyEmbedder> train_toy_embedder(const std::string& name, const ToyEmbedderSpec& spec,
                                                const ImageSet& train, const ImageSet& val);
std::shared_ptr<ToyEmbedder> train_toy_embedder(const std::string& name, const ToyEmbedderSpec& spec,
                                                const IdentityDataset& dataset, int64_t image_size);

/// Wraps a user-supplied TorchScript recognition model. A missing weights
/// file leaves the embedder unloaded: embed() throws, nothing else degrades.
class TorchScriptEmbedder : public FaceEmbedder {
 public:
  TorchScriptEmbedder(std::string name, const std::filesystem::path& weights, int64_t dim, Preprocess preprocess);
  ~TorchScriptEmbedder() override;

  int64_t dim() const override { return dim_; }
  bool loaded() const override;
  std::vector<torch::Tensor> parameters() const override;

 protected:
  torch::Tensor features(const torch::Tensor& preprocessed) const override;

 private:
  struct Holder;
  int64_t dim_;
  std::unique_ptr<Holder> holder_;
};

class EmbedderRegistry {
 public:
  void add(std::shared_ptr<FaceEmbedder> embedder);
  bool contains(const std::string& name) const { return embedders_.count(name) > 0; }
  std::shared_ptr<FaceEmbedder> get(const std::string& name) const;
  std::vector<std::shared_ptr<FaceEmbedder>> get(const std::vector<std::string>& names) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, std::shared_ptr<FaceEmbedder>> embedders_;
};

}  // namespace nullswap
