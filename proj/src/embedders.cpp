#include "nullswap/embedders.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <torch/script.h>

#include "nullswap/checkpoint.hpp"

namespace nullswap {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

torch::Tensor Preprocess::apply(const torch::Tensor& image) const {
  auto x = image;
  if (input_size > 0 && (x.size(2) != input_size || x.size(3) != input_size)) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{input_size, input_size})
                              .mode(torch::kBilinear)
                              .align_corners(false));
  }
  if (mean == std::array<double, 3>{0.5, 0.5, 0.5} && std == std::array<double, 3>{0.5, 0.5, 0.5}) return x;
  auto opts = x.options().requires_grad(false);
  auto m = torch::tensor({mean[0], mean[1], mean[2]}, opts).view({1, 3, 1, 1});
  auto s = torch::tensor({std[0], std[1], std[2]}, opts).view({1, 3, 1, 1});
  return ((x + 1.0) * 0.5 - m) / s;
}

bool FaceEmbedder::frozen() const {
  const auto params = parameters();
  return std::none_of(params.begin(), params.end(), [](const torch::Tensor& p) { return p.requires_grad(); });
}

torch::Tensor FaceEmbedder::embed(const torch::Tensor& image) const {
  if (!loaded()) throw EmbedderNotLoaded("embedder '" + name_ + "' has no weights loaded");
  auto f = features(preprocess_.apply(image));
  return F::normalize(f, F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

torch::Tensor cosine_rows(const torch::Tensor& a, const torch::Tensor& b) {
  return F::cosine_similarity(a, b, F::CosineSimilarityFuncOptions().dim(1).eps(1e-12));
}

ToyArch parse_toy_arch(const std::string& s) {
  if (s == "A" || s == "a") return ToyArch::A;
  if (s == "B" || s == "b") return ToyArch::B;
  if (s == "C" || s == "c") return ToyArch::C;
  throw std::invalid_argument("unknown toy embedder architecture '" + s + "'");
}

std::string to_string(ToyArch arch) {
  switch (arch) {
    case ToyArch::A: return "A";
    case ToyArch::B: return "B";
    case ToyArch::C: return "C";
  }
  return "?";
}

namespace {

void conv_bn(torch::nn::Sequential& s, int64_t in, int64_t out, int64_t stride, bool leaky) {
  s->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  s->push_back(torch::nn::BatchNorm2d(out));
  if (leaky) {
    s->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.1)));
  } else {
    s->push_back(torch::nn::ReLU());
  }
}

}  // namespace

ToyNetImpl::ToyNetImpl(ToyArch arch_, int64_t dim, int64_t num_classes) : arch(arch_) {
  body = register_module("body", torch::nn::Sequential());
  int64_t feat = 0;
  switch (arch) {
    case ToyArch::A:
      conv_bn(body, 3, 16, 1, false);
      body->push_back(torch::nn::MaxPool2d(2));
      conv_bn(body, 16, 32, 1, false);
      body->push_back(torch::nn::MaxPool2d(2));
      conv_bn(body, 32, 64, 1, false);
      body->push_back(torch::nn::MaxPool2d(2));
      conv_bn(body, 64, 64, 1, false);
      feat = 64;
      break;
    case ToyArch::B:
      conv_bn(body, 3, 24, 2, false);
      conv_bn(body, 24, 48, 2, false);
      conv_bn(body, 48, 48, 1, false);
      conv_bn(body, 48, 96, 2, false);
      conv_bn(body, 96, 96, 1, false);
      feat = 96;
      break;
    case ToyArch::C:
      conv_bn(body, 3, 16, 1, true);
      conv_bn(body, 16, 16, 1, true);
      body->push_back(torch::nn::AvgPool2d(2));
      conv_bn(body, 16, 32, 1, true);
      conv_bn(body, 32, 32, 1, true);
      body->push_back(torch::nn::AvgPool2d(2));
      conv_bn(body, 32, 64, 1, true);
      conv_bn(body, 64, 64, 1, true);
      body->push_back(torch::nn::AvgPool2d(2));
      feat = 128;
      break;
  }
  project = register_module("project", torch::nn::Linear(feat, dim));
  class_weights = register_parameter("class_weights", torch::randn({num_classes, dim}) * 0.1);
}

torch::Tensor ToyNetImpl::embedding(const torch::Tensor& x) {
  // Per-image standardization (prewhitening); the floor keeps flat images finite.
  const auto n = static_cast<double>(x[0].numel());
  auto mu = x.mean({1, 2, 3}, true);
  auto sd = x.std({1, 2, 3}, false, true).clamp_min(1.0 / std::sqrt(n));
  auto h = body->forward((x - mu) / sd);
  torch::Tensor pooled;
  switch (arch) {
    case ToyArch::A: pooled = h.mean({2, 3}); break;
    case ToyArch::B: pooled = h.amax({2, 3}); break;
    case ToyArch::C: pooled = torch::cat({h.mean({2, 3}), h.amax({2, 3})}, 1); break;
  }
  return project(pooled);
}

torch::Tensor ToyNetImpl::logits(const torch::Tensor& x, const torch::Tensor& labels, double margin) {
  auto e = F::normalize(embedding(x), F::NormalizeFuncOptions().dim(1));
  auto w = F::normalize(class_weights, F::NormalizeFuncOptions().dim(1));
  auto cos = e.matmul(w.t());
  if (labels.defined() && margin != 0.0) {
    cos = cos - margin * F::one_hot(labels, cos.size(1)).to(cos.dtype());
  }
  return scale * cos;
}

ToyEmbedder::ToyEmbedder(std::string name, ToyArch arch, int64_t dim, int64_t num_classes)
    : FaceEmbedder(std::move(name), Preprocess{}),
      arch_(arch),
      dim_(dim),
      num_classes_(num_classes),
      net_(ToyNet(arch, dim, num_classes)) {}

std::vector<torch::Tensor> ToyEmbedder::parameters() const { return net_->parameters(); }

int64_t ToyEmbedder::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : net_->parameters()) n += p.numel();
  return n;
}

void ToyEmbedder::freeze() {
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
  net_->eval();
}

torch::Tensor ToyEmbedder::features(const torch::Tensor& preprocessed) const { return net_.ptr()->embedding(preprocessed); }

void ToyEmbedder::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive archive;
  net_->save(archive);
  archive.save_to(path.string());
  write_sidecar(path, "toy_embedder",
                {{"name", name()},
                 {"arch", to_string(arch_)},
                 {"dim", dim_},
                 {"num_classes", num_classes_},
                 {"validation_top1", val_top1_}});
}

std::shared_ptr<ToyEmbedder> ToyEmbedder::load(const fs::path& path) {
  const auto meta = read_sidecar(path, "toy_embedder");
  auto e = std::make_shared<ToyEmbedder>(meta.at("name").get<std::string>(),
                                         parse_toy_arch(meta.at("arch").get<std::string>()),
                                         meta.at("dim").get<int64_t>(), meta.at("num_classes").get<int64_t>());
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(path.string());
    e->net_->load(archive);
  } catch (const c10::Error& err) {
    throw CheckpointError("cannot load toy embedder weights from " + path.string() + ": " + err.what_without_backtrace());
  }
  e->val_top1_ = meta.at("validation_top1").get<double>();
  e->freeze();
  return e;
}

namespace {

double classifier_top1(ToyNet& net, const ImageSet& set) {
  if (set.size() == 0) return 0.0;
  torch::NoGradGuard guard;
  net->eval();
  int64_t correct = 0;
  for (int64_t start = 0; start < set.size(); start += 64) {
    const int64_t end = std::min(set.size(), start + 64);
    auto pred = net->logits(set.images.slice(0, start, end)).argmax(1);
    for (int64_t i = start; i < end; ++i) correct += pred[i - start].item<int64_t>() == set.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

}  // namespace

std::shared_ptr<ToyEmbedder> train_toy_embedder(const std::string& name, const ToyEmbedderSpec& spec,
                                                const ImageSet& train, const ImageSet& val) {
  const auto max_label = train.labels.empty() ? 0 : *std::max_element(train.labels.begin(), train.labels.end());
  const int64_t classes = max_label + 1;
  std::vector<int64_t> distinct(train.labels);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw std::invalid_argument("toy embedder training needs at least two identities");

  torch::manual_seed(spec.seed);
  auto embedder = std::make_shared<ToyEmbedder>(name, spec.arch, spec.dim, classes);
  auto& net = embedder->net();
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(spec.learning_rate));
  std::mt19937_64 rng(spec.seed);
  std::vector<int64_t> order(static_cast<std::size_t>(train.size()));
  auto labels = torch::tensor(train.labels, torch::kInt64);

  const int64_t steps_per_epoch = (train.size() + spec.batch_size - 1) / spec.batch_size;
  const int64_t total_steps = std::max<int64_t>(1, spec.epochs * steps_per_epoch);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < spec.epochs; ++epoch) {
    net->train();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t start = 0; start < train.size(); start += spec.batch_size) {
      const int64_t end = std::min(train.size(), start + spec.batch_size);
      if (end - start < 2) continue;  // batch norm needs more than one sample
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + end), torch::kInt64);
      auto x = train.images.index_select(0, idx);
      if (rng() & 1) x = x.flip({3});
      auto y = labels.index_select(0, idx);
      // cosine learning-rate decay
      const double lr = spec.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total_steps));
      for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
      opt.zero_grad();
      auto loss = F::cross_entropy(net->logits(x, y, spec.margin), y);
      loss.backward();
      opt.step();
      ++step;
    }
  }
  const double top1 = classifier_top1(net, val);
  embedder->set_validation_top1(top1);
  embedder->freeze();
  if (top1 < spec.target_top1) {
    throw EmbedderTrainingError("toy embedder '" + name + "' reached validation top-1 " + std::to_string(top1) +
                                ", below the target " + std::to_string(spec.target_top1));
  }
  return embedder;
}

std::shared_ptr<ToyEmbedder> train_toy_embedder(const std::string& name, const ToyEmbedderSpec& spec,
                                                const IdentityDataset& dataset, int64_t image_size) {
  if (dataset.identity_count() < 2) throw std::invalid_argument("toy embedder training needs at least two identities");
  return train_toy_embedder(name, spec, load_split(dataset, Split::Train, image_size),
                            load_split(dataset, Split::Val, image_size));
}

struct TorchScriptEmbedder::Holder {
  torch::jit::script::Module module;
  bool ok = false;
};

TorchScriptEmbedder::TorchScriptEmbedder(std::string name, const fs::path& weights, int64_t dim, Preprocess pre)
    : FaceEmbedder(std::move(name), pre), dim_(dim), holder_(std::make_unique<Holder>()) {
  if (!fs::exists(weights)) return;
  try {
    holder_->module = torch::jit::load(weights.string());
    holder_->module.eval();
    for (auto p : holder_->module.parameters()) p.set_requires_grad(false);
    holder_->ok = true;
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load TorchScript embedder '" + this->name() + "' from " + weights.string() + ": " +
                          e.what_without_backtrace());
  }
}

TorchScriptEmbedder::~TorchScriptEmbedder() = default;

bool TorchScriptEmbedder::loaded() const { return holder_->ok; }

std::vector<torch::Tensor> TorchScriptEmbedder::parameters() const {
  std::vector<torch::Tensor> out;
  if (holder_->ok)
    for (const auto& p : holder_->module.parameters()) out.push_back(p);
  return out;
}

torch::Tensor TorchScriptEmbedder::features(const torch::Tensor& preprocessed) const {
  auto out = holder_->module.forward({preprocessed}).toTensor();
  if (out.dim() != 2 || out.size(1) != dim_) {
    throw std::runtime_error("embedder '" + name() + "' returned an unexpected shape");
  }
  return out;
}

void EmbedderRegistry::add(std::shared_ptr<FaceEmbedder> embedder) {
  const auto name = embedder->name();
  embedders_[name] = std::move(embedder);
}

std::shared_ptr<FaceEmbedder> EmbedderRegistry::get(const std::string& name) const {
  auto it = embedders_.find(name);
  if (it == embedders_.end()) throw std::out_of_range("no embedder registered as '" + name + "'");
  return it->second;
}

std::vector<std::shared_ptr<FaceEmbedder>> EmbedderRegistry::get(const std::vector<std::string>& names) const {
  std::vector<std::shared_ptr<FaceEmbedder>> out;
  for (const auto& n : names) out.push_back(get(n));
  return out;
}

std::vector<std::string> EmbedderRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : embedders_) out.push_back(n);
  return out;
}

}  // namespace nullswap
