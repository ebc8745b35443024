#include "nullswap/trainer.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <mutex>
#include <numeric>
#include <random>
#include <set>

#include "nullswap/checkpoint.hpp"
#include "nullswap/evalsuite.hpp"
#include "nullswap/hash.hpp"

namespace nullswap {

namespace fs = std::filesystem;
using nlohmann::json;

SessionMode SessionMode::parse(const std::string& text) {
  if (text == "dlw") return {SessionKind::Dlw, {}};
  if (text == "average") return {SessionKind::Average, {}};
  if (text.rfind("single:", 0) == 0 && text.size() > 7) return {SessionKind::Single, text.substr(7)};
  throw ConfigError("session_mode must be single:<embedder>, average or dlw, got '" + text + "'");
}

std::string SessionMode::str() const {
  switch (kind) {
    case SessionKind::Single: return "single:" + embedder;
    case SessionKind::Average: return "average";
    case SessionKind::Dlw: return "dlw";
  }
  return "dlw";
}

// --- config -------------------------------------------------------------------

namespace {

struct Field {
  const char* name;
  std::function<void(TrainConfig&, const std::string&, const ConfigValue&)> set;
  std::function<ConfigValue(const TrainConfig&)> get;
};

template <typename Ref>
Field double_field(const char* name, Ref ref) {
  return {name, [ref](TrainConfig& c, const std::string& k, const ConfigValue& v) { ref(c) = as_double(k, v); },
          [ref](const TrainConfig& c) { return ConfigValue(ref(const_cast<TrainConfig&>(c))); }};
}

template <typename Ref>
Field int_field(const char* name, Ref ref) {
  return {name,
          [ref](TrainConfig& c, const std::string& k, const ConfigValue& v) {
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(as_int(k, v));
          },
          [ref](const TrainConfig& c) { return ConfigValue(static_cast<int64_t>(ref(const_cast<TrainConfig&>(c)))); }};
}

template <typename Ref>
Field string_field(const char* name, Ref ref) {
  return {name, [ref](TrainConfig& c, const std::string& k, const ConfigValue& v) { ref(c) = as_string(k, v); },
          [ref](const TrainConfig& c) { return ConfigValue(ref(const_cast<TrainConfig&>(c))); }};
}

template <typename Ref>
Field list_field(const char* name, Ref ref) {
  return {name, [ref](TrainConfig& c, const std::string& k, const ConfigValue& v) { ref(c) = as_string_list(k, v); },
          [ref](const TrainConfig& c) { return ConfigValue(ref(const_cast<TrainConfig&>(c))); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      double_field("lr_generator", [](TrainConfig& c) -> double& { return c.lr_generator; }),
      double_field("lr_discriminator", [](TrainConfig& c) -> double& { return c.lr_discriminator; }),
      int_field("epochs", [](TrainConfig& c) -> int64_t& { return c.epochs; }),
      int_field("batch_size", [](TrainConfig& c) -> int64_t& { return c.batch_size; }),
      int_field("image_size", [](TrainConfig& c) -> int64_t& { return c.image_size; }),
      string_field("session_mode", [](TrainConfig& c) -> std::string& { return c.session_mode; }),
      int_field("seed", [](TrainConfig& c) -> std::uint64_t& { return c.seed; }),
      double_field("grad_clip", [](TrainConfig& c) -> double& { return c.grad_clip; }),
      double_field("lambda_id", [](TrainConfig& c) -> double& { return c.coefficients.lambda_id; }),
      double_field("lambda_mse", [](TrainConfig& c) -> double& { return c.coefficients.lambda_mse; }),
      double_field("lambda_lpips", [](TrainConfig& c) -> double& { return c.coefficients.lambda_lpips; }),
      double_field("lambda_d", [](TrainConfig& c) -> double& { return c.coefficients.lambda_d; }),
      double_field("dlw_alpha", [](TrainConfig& c) -> double& { return c.dlw.alpha; }),
      double_field("dlw_beta_init", [](TrainConfig& c) -> double& { return c.dlw.beta_init; }),
      double_field("dlw_beta_cap", [](TrainConfig& c) -> double& { return c.dlw.beta_cap; }),
      double_field("dlw_beta_rate", [](TrainConfig& c) -> double& { return c.dlw.beta_rate; }),
      int_field("dlw_window", [](TrainConfig& c) -> int64_t& { return c.dlw.window; }),
      int_field("dlw_epoch_cap", [](TrainConfig& c) -> int64_t& { return c.dlw.epoch_cap; }),
      double_field("dlw_eps_denom", [](TrainConfig& c) -> double& { return c.dlw.eps_denom; }),
      double_field("dlw_eps_weight", [](TrainConfig& c) -> double& { return c.dlw.eps_weight; }),
      double_field("dlw_eps_progress", [](TrainConfig& c) -> double& { return c.dlw.eps_progress; }),
      int_field("id_blocks", [](TrainConfig& c) -> int64_t& { return c.generator.id_blocks; }),
      int_field("perturb_blocks", [](TrainConfig& c) -> int64_t& { return c.generator.perturb_blocks; }),
      int_field("feature_blocks", [](TrainConfig& c) -> int64_t& { return c.generator.feature_blocks; }),
      int_field("base_channels", [](TrainConfig& c) -> int64_t& { return c.generator.base_channels; }),
      int_field("discriminator_blocks", [](TrainConfig& c) -> int64_t& { return c.generator.discriminator_blocks; }),
      list_field("embedders", [](TrainConfig& c) -> std::vector<std::string>& { return c.embedders; }),
      list_field("eval_embedders", [](TrainConfig& c) -> std::vector<std::string>& { return c.eval_embedders; }),
      string_field("dataset", [](TrainConfig& c) -> std::string& { return c.dataset; }),
      string_field("run_dir", [](TrainConfig& c) -> std::string& { return c.run_dir; }),
      string_field("perceptual_weights", [](TrainConfig& c) -> std::string& { return c.perceptual_weights; }),
      list_field("pretrained_embedders",
                 [](TrainConfig& c) -> std::vector<std::string>& { return c.pretrained_embedders; }),
      int_field("toy_embedder_epochs", [](TrainConfig& c) -> int64_t& { return c.toy_embedder_epochs; }),
      Field{"log_weights",
            [](TrainConfig& c, const std::string& k, const ConfigValue& v) { c.log_weights = as_bool(k, v); },
            [](const TrainConfig& c) { return ConfigValue(c.log_weights); }},
  };
  return table;
}

ConfigValue json_to_value(const std::string& key, const json& j) {
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_number_integer()) return j.get<int64_t>();
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  if (j.is_array()) return j.get<std::vector<std::string>>();
  throw ConfigError("config key '" + key + "' has an unsupported JSON type");
}

}  // namespace

void TrainConfig::set(const std::string& key, const ConfigValue& value) {
  for (const auto& f : fields()) {
    if (key == f.name) {
      f.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void TrainConfig::apply(const ConfigDocument& doc) {
  for (const auto& [k, v] : doc) set(k, v);
}

ConfigDocument TrainConfig::to_document() const {
  ConfigDocument doc;
  for (const auto& f : fields()) doc.emplace(f.name, f.get(*this));
  return doc;
}

std::string TrainConfig::to_toml() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.name) + " = " + format_config_value(f.get(*this)) + "\n";
  return out;
}

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };
  check(lr_generator > 0 && std::isfinite(lr_generator), "lr_generator must be > 0");
  check(lr_discriminator > 0 && std::isfinite(lr_discriminator), "lr_discriminator must be > 0");
  check(epochs >= 0, "epochs must be >= 0");
  check(batch_size >= 2, "batch_size must be >= 2 (batch normalization)");
  check(image_size >= 16 && image_size % 4 == 0, "image_size must be a multiple of 4 and >= 16");
  check(grad_clip > 0, "grad_clip must be > 0");
  check(toy_embedder_epochs >= 1, "toy_embedder_epochs must be >= 1");
  for (auto [what, fn] : std::initializer_list<std::pair<const char*, std::function<void()>>>{
           {"loss coefficients", [&] { coefficients.validate(); }},
           {"dlw", [&] { dlw.validate(); }},
           {"generator", [&] { generator.validate(); }}}) {
    try {
      fn();
    } catch (const std::exception& e) {
      problems.push_back(std::string(what) + ": " + e.what());
    }
  }
  check(!embedders.empty(), "embedders must name at least one embedder");
  check(std::set<std::string>(embedders.begin(), embedders.end()).size() == embedders.size(),
        "embedders must not repeat");
  try {
    const auto mode = session();
    if (mode.kind == SessionKind::Dlw) check(embedders.size() >= 2, "session_mode dlw needs at least two embedders");
    if (mode.kind == SessionKind::Single) {
      check(std::find(embedders.begin(), embedders.end(), mode.embedder) != embedders.end(),
            "session_mode names embedder '" + mode.embedder + "' which is not in embedders");
    }
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

TrainConfig TrainConfig::from_file(const fs::path& path) {
  TrainConfig c;
  c.apply(read_config_file(path));
  return c;
}

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.epochs = 30;
  c.batch_size = 32;
  c.image_size = 64;
  c.generator = GeneratorConfig::toy();
  c.eval_embedders = {"A", "B", "C"};
  return c;
}

void to_json(json& j, const TrainConfig& c) {
  j = json::object();
  for (const auto& [k, v] : c.to_document()) {
    std::visit([&](const auto& x) { j[k] = x; }, v);
  }
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  for (const auto& [k, v] : j.items()) c.set(k, json_to_value(k, v));
}

std::string config_hash(const TrainConfig& c) { return hex_digest(fnv1a(json(c).dump()), 12); }

void to_json(json& j, const EpochMetrics& m) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(format_number(v)); };
  json cos = json::array();
  for (double v : m.val_cosine) cos.push_back(num(v));
  j = {{"epoch", m.epoch},
       {"iterations", m.iterations},
       {"train_total", num(m.train_total)},
       {"train_identity", num(m.train_identity)},
       {"train_mse", num(m.train_mse)},
       {"val_psnr", num(m.val_psnr)},
       {"val_ssim", num(m.val_ssim)},
       {"embedders", m.embedder_names},
       {"val_cosine", cos},
       {"composite", num(m.composite)},
       {"seconds", m.seconds}};
}

void from_json(const json& j, EpochMetrics& m) {
  auto num = [](const json& v) {
    if (v.is_string()) return std::stod(v.get<std::string>());
    return v.get<double>();
  };
  j.at("epoch").get_to(m.epoch);
  j.at("iterations").get_to(m.iterations);
  m.train_total = num(j.at("train_total"));
  m.train_identity = num(j.at("train_identity"));
  m.train_mse = num(j.at("train_mse"));
  m.val_psnr = num(j.at("val_psnr"));
  m.val_ssim = num(j.at("val_ssim"));
  j.at("embedders").get_to(m.embedder_names);
  m.val_cosine.clear();
  for (const auto& v : j.at("val_cosine")) m.val_cosine.push_back(num(v));
  m.composite = num(j.at("composite"));
  j.at("seconds").get_to(m.seconds);
}

// --- identity aggregation ---------------------------------------------------------

IdentityAggregate aggregate_identity(const SessionMode& mode, const std::vector<std::string>& names,
                                     const std::vector<torch::Tensor>& losses, dlw::LossHistoryBank& bank,
                                     const dlw::DlwConfig& config, int64_t epoch, int64_t iteration) {
  if (losses.size() != names.size() || losses.empty()) {
    throw std::invalid_argument("aggregate_identity: one loss per embedder is required");
  }
  IdentityAggregate out;
  out.weights.assign(losses.size(), 0.0);
  switch (mode.kind) {
    case SessionKind::Single: {
      const auto it = std::find(names.begin(), names.end(), mode.embedder);
      if (it == names.end()) throw std::invalid_argument("aggregate_identity: unknown embedder " + mode.embedder);
      const auto i = static_cast<std::size_t>(it - names.begin());
      out.value = losses[i];
      out.weights[i] = 1.0;
      break;
    }
    case SessionKind::Average: {
      out.value = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) out.value = out.value + losses[i];
      out.value = out.value / static_cast<double>(losses.size());
      std::fill(out.weights.begin(), out.weights.end(), 1.0 / static_cast<double>(losses.size()));
      break;
    }
    case SessionKind::Dlw: {
      // The bank sees 1 + cosine so recorded losses stay non-negative; the
      // shift changes neither the minimizer nor the gradient.
      std::vector<double> shifted;
      for (const auto& l : losses) shifted.push_back(1.0 + l.item<double>());
      bank.record(shifted, epoch, iteration);
      auto step = dlw::weighted_identity_loss(bank, shifted, config);
      out.value = losses[0] * step.weights.normalized[0];
      for (std::size_t i = 1; i < losses.size(); ++i) out.value = out.value + losses[i] * step.weights.normalized[i];
      out.weights = step.weights.normalized;
      out.dlw_step = std::move(step);
      break;
    }
  }
  return out;
}

// --- run ------------------------------------------------------------------------

namespace {

at::Generator make_rng(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed ^ 0x9e3779b97f4a7c15ULL); }

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

void clip(const std::vector<torch::Tensor>& params, double max_norm) {
  torch::nn::utils::clip_grad_norm_(params, max_norm);
}

}  // namespace

TrainRun::TrainRun(TrainConfig config, std::vector<std::shared_ptr<FaceEmbedder>> embedders, PerceptualNet perceptual)
    : config_(std::move(config)),
      embedders_(std::move(embedders)),
      perceptual_(std::move(perceptual)),
      bank_(1, 2),
      rng_(make_rng(0)) {
  config_.validate();
  session_ = config_.session();
  if (embedders_.size() != config_.embedders.size()) {
    throw std::invalid_argument("train run: expected " + std::to_string(config_.embedders.size()) + " embedders, got " +
                                std::to_string(embedders_.size()));
  }
  for (std::size_t i = 0; i < embedders_.size(); ++i) {
    if (!embedders_[i]) throw std::invalid_argument("train run: embedder " + config_.embedders[i] + " is null");
    if (embedders_[i]->name() != config_.embedders[i]) {
      throw std::invalid_argument("train run: embedder " + std::to_string(i) + " is '" + embedders_[i]->name() +
                                  "', config expects '" + config_.embedders[i] + "'");
    }
  }
  if (perceptual_.is_empty()) throw std::invalid_argument("train run: perceptual net not loaded");
  check_frozen();

  torch::manual_seed(config_.seed);
  generator_ = Generator(config_.generator);
  discriminator_ = Discriminator(config_.generator);
  opt_g_ = std::make_unique<torch::optim::Adam>(generator_->parameters(),
                                                torch::optim::AdamOptions(config_.lr_generator).betas({0.5, 0.999}));
  opt_d_ = std::make_unique<torch::optim::Adam>(discriminator_->parameters(),
                                                torch::optim::AdamOptions(config_.lr_discriminator).betas({0.5, 0.999}));
  bank_ = dlw::LossHistoryBank(embedders_.size(), config_.dlw.window);
  rng_ = make_rng(config_.seed);
}

void TrainRun::check_frozen() const {
  for (const auto& e : embedders_) {
    if (!e->frozen()) throw std::invalid_argument("train run: embedder " + e->name() + " is not frozen");
  }
  for (const auto& p : perceptual_->parameters()) {
    if (p.requires_grad()) throw std::invalid_argument("train run: perceptual net is not frozen");
  }
}

IterationMetrics TrainRun::train_step(const torch::Tensor& batch, const std::vector<torch::Tensor>& clean_embeddings) {
  check_image_tensor(batch, "training batch");
  if (!clean_embeddings.empty() && clean_embeddings.size() != embedders_.size()) {
    throw std::invalid_argument("train_step: one clean embedding tensor per embedder is required");
  }
  generator_->train();
  discriminator_->train();
  IterationMetrics m;
  m.epoch = epoch_;
  m.iteration = iteration_;

  // generator update; the discriminator is only a fixed critic here
  set_requires_grad(*discriminator_, false);
  auto cloaked = generator_->forward(batch, NoiseMode::Train, rng_);

  std::vector<torch::Tensor> per(embedders_.size());
  m.identity_per_embedder.assign(embedders_.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < embedders_.size(); ++i) {
    if (session_.kind == SessionKind::Single && embedders_[i]->name() != session_.embedder) continue;
    torch::Tensor reference;
    if (!clean_embeddings.empty()) {
      reference = clean_embeddings[i];
    } else {
      torch::NoGradGuard guard;
      reference = embedders_[i]->embed(batch);
    }
    per[i] = cosine_rows(reference, embedders_[i]->embed(cloaked)).mean();
    m.identity_per_embedder[i] = per[i].item<double>();
    if (!std::isfinite(m.identity_per_embedder[i])) {
      set_requires_grad(*discriminator_, true);
      throw NonFiniteLoss("non-finite identity loss for embedder " + embedders_[i]->name() + " at iteration " +
                              std::to_string(iteration_) + "; last good checkpoint: " + last_good_.string(),
                          last_good_);
    }
  }
  if (session_.kind == SessionKind::Single) {
    // undefined tensors are never read in single mode
    for (auto& t : per) {
      if (!t.defined()) t = torch::zeros({});
    }
  }
  auto identity = aggregate_identity(session_, config_.embedders, per, bank_, config_.dlw, epoch_, iteration_);

  LossComponents c;
  c.identity = identity.value;
  c.mse = reconstruction_loss(batch, cloaked);
  c.perceptual = perceptual_loss(batch, cloaked, perceptual_);
  c.adversarial = adversarial_loss(discriminator_->forward(cloaked));
  auto total = total_loss(c, config_.coefficients);

  m.identity = c.identity.item<double>();
  m.weights = identity.weights;
  m.mse = c.mse.item<double>();
  m.perceptual = c.perceptual.item<double>();
  m.adversarial = c.adversarial.item<double>();
  m.total = total.item<double>();
  if (!std::isfinite(m.total)) {
    set_requires_grad(*discriminator_, true);
    throw NonFiniteLoss("non-finite generator loss at iteration " + std::to_string(iteration_) +
                            "; last good checkpoint: " + last_good_.string(),
                        last_good_);
  }
  opt_g_->zero_grad();
  total.backward();
  clip(generator_->parameters(), config_.grad_clip);
  opt_g_->step();
  set_requires_grad(*discriminator_, true);

  // discriminator update on the detached cloaked batch
  auto d_loss = discriminator_loss(discriminator_->forward(batch), discriminator_->forward(cloaked.detach()));
  m.discriminator = d_loss.item<double>();
  if (!std::isfinite(m.discriminator)) {
    throw NonFiniteLoss("non-finite discriminator loss at iteration " + std::to_string(iteration_) +
                            "; last good checkpoint: " + last_good_.string(),
                        last_good_);
  }
  opt_d_->zero_grad();
  d_loss.backward();
  clip(discriminator_->parameters(), config_.grad_clip);
  opt_d_->step();

  last_weights_ = identity.weights;
  last_dlw_step_ = std::move(identity.dlw_step);
  ++iteration_;
  return m;
}

torch::Tensor TrainRun::cloak(const torch::Tensor& images, int64_t batch) {
  torch::NoGradGuard guard;
  const bool was_training = generator_->is_training();
  generator_->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < images.size(0); s += batch) {
    parts.push_back(generator_->forward(images.slice(0, s, std::min(images.size(0), s + batch)), NoiseMode::Deterministic));
  }
  if (was_training) generator_->train();
  if (parts.empty()) return torch::empty_like(images);
  return torch::cat(parts);
}

EpochMetrics TrainRun::validate(const ImageSet& val, const std::vector<std::shared_ptr<FaceEmbedder>>& eval_embedders) {
  const auto& embs = eval_embedders.empty() ? embedders_ : eval_embedders;
  EpochMetrics m;
  m.epoch = epoch_;
  for (const auto& e : embs) m.embedder_names.push_back(e->name());
  if (val.size() == 0) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.val_psnr = m.val_ssim = m.composite = nan;
    m.val_cosine.assign(embs.size(), nan);
    return m;
  }
  auto cloaked = cloak(val.images);
  const auto q = summarize_quality(val.images, cloaked);
  m.val_psnr = q.mean_psnr;
  m.val_ssim = q.mean_ssim;
  double loss_cos = 0.0;
  int64_t loss_count = 0;
  for (const auto& e : embs) {
    const double cos = cosine_rows(embed_all(*e, val.images), embed_all(*e, cloaked)).mean().item<double>();
    m.val_cosine.push_back(cos);
    if (std::find(config_.embedders.begin(), config_.embedders.end(), e->name()) != config_.embedders.end()) {
      loss_cos += cos;
      ++loss_count;
    }
  }
  // selection only looks at the loss embedders, never at held-out ones
  const double psnr_term = std::min(m.val_psnr, 100.0) / 50.0;
  m.composite = psnr_term - (loss_count > 0 ? loss_cos / static_cast<double>(loss_count) : 0.0);
  return m;
}

void TrainRun::end_epoch(const EpochMetrics& metrics) {
  history_.push_back(metrics);
  ++epoch_;
}

void TrainRun::save_checkpoint(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive root, g, d, og, od;
  generator_->save(g);
  discriminator_->save(d);
  opt_g_->save(og);
  opt_d_->save(od);
  root.write("generator", g);
  root.write("discriminator", d);
  root.write("opt_g", og);
  root.write("opt_d", od);
  {
    std::lock_guard<std::mutex> lock(rng_.mutex());
    root.write("rng_state", rng_.get_state());
  }
  const auto tmp = fs::path(path.string() + ".tmp");
  root.save_to(tmp.string());
  fs::rename(tmp, path);

  json history = json::array();
  for (const auto& h : history_) history.push_back(h);
  json body{{"config", config_},
            {"config_hash", config_hash(config_)},
            {"session_mode", session_.str()},
            {"epoch", epoch_},
            {"iteration", iteration_},
            {"dlw_bank", bank_},
            {"last_weights", last_weights_},
            {"best_score", std::isfinite(best_score_) ? json(best_score_) : json(nullptr)},
            {"metrics", history_.empty() ? json(nullptr) : json(history_.back())},
            {"history", history}};
  write_sidecar(path, "train_run", body);
  last_good_ = path;
}

TrainRun TrainRun::load_checkpoint(const fs::path& path, std::vector<std::shared_ptr<FaceEmbedder>> embedders,
                                   PerceptualNet perceptual) {
  const auto side = read_sidecar(path, "train_run");
  TrainConfig config;
  try {
    config = side.at("config").get<TrainConfig>();
    if (side.at("config_hash").get<std::string>() != config_hash(config)) {
      throw CheckpointError("config hash mismatch in " + sidecar_path(path).string());
    }
  } catch (const json::exception& e) {
    throw CheckpointError("malformed sidecar " + sidecar_path(path).string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError("sidecar config of " + path.string() + " is invalid: " + e.what());
  }
  TrainRun run(config, std::move(embedders), std::move(perceptual));
  try {
    torch::serialize::InputArchive root, g, d, og, od;
    root.load_from(path.string());
    root.read("generator", g);
    root.read("discriminator", d);
    root.read("opt_g", og);
    root.read("opt_d", od);
    run.generator_->load(g);
    run.discriminator_->load(d);
    run.opt_g_->load(og);
    run.opt_d_->load(od);
    torch::Tensor state;
    root.read("rng_state", state);
    std::lock_guard<std::mutex> lock(run.rng_.mutex());
    run.rng_.set_state(state);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  try {
    run.epoch_ = side.at("epoch").get<int64_t>();
    run.iteration_ = side.at("iteration").get<int64_t>();
    run.bank_ = dlw::LossHistoryBank::from_json(side.at("dlw_bank"));
    run.last_weights_ = side.at("last_weights").get<std::vector<double>>();
    const auto& best = side.at("best_score");
    run.best_score_ = best.is_null() ? -std::numeric_limits<double>::infinity() : best.get<double>();
    for (const auto& h : side.at("history")) run.history_.push_back(h.get<EpochMetrics>());
  } catch (const std::exception& e) {
    throw CheckpointError("malformed sidecar " + sidecar_path(path).string() + ": " + e.what());
  }
  if (run.bank_.num_objectives() != run.embedders_.size()) {
    throw CheckpointError("checkpoint " + path.string() + " has a DLW bank for " +
                          std::to_string(run.bank_.num_objectives()) + " objectives");
  }
  run.last_good_ = path;
  return run;
}

Generator load_generator(const fs::path& checkpoint) {
  const auto side = read_sidecar(checkpoint, "train_run");
  GeneratorConfig gc;
  try {
    gc = side.at("config").get<TrainConfig>().generator;
  } catch (const std::exception& e) {
    throw CheckpointError("malformed sidecar " + sidecar_path(checkpoint).string() + ": " + e.what());
  }
  Generator g(gc);
  try {
    torch::serialize::InputArchive root, sub;
    root.load_from(checkpoint.string());
    root.read("generator", sub);
    g->load(sub);
  } catch (const c10::Error& e) {
    throw CheckpointError("cannot load generator from " + checkpoint.string() + ": " + e.what_without_backtrace());
  }
  for (auto& p : g->parameters()) p.set_requires_grad(false);
  g->eval();
  return g;
}

// --- logs -------------------------------------------------------------------------

LossLog::LossLog(std::ostream& out, const std::vector<std::string>& names, bool write_header) : out_(out) {
  if (!write_header) return;
  out_ << "epoch,iteration,identity";
  for (const auto& n : names) out_ << ",loss_" << n;
  for (const auto& n : names) out_ << ",weight_" << n;
  out_ << ",mse,perceptual,adversarial,total,discriminator\n";
}

void LossLog::append(const IterationMetrics& m) {
  out_ << m.epoch << ',' << m.iteration << ',' << format_number(m.identity);
  for (double v : m.identity_per_embedder) out_ << ',' << format_number(v);
  for (double v : m.weights) out_ << ',' << format_number(v);
  out_ << ',' << format_number(m.mse) << ',' << format_number(m.perceptual) << ',' << format_number(m.adversarial)
       << ',' << format_number(m.total) << ',' << format_number(m.discriminator) << '\n';
}

// --- fit ----------------------------------------------------------------------------

namespace {

std::ofstream open_log(const fs::path& path, bool resume, bool& write_header) {
  write_header = !(resume && fs::exists(path) && fs::file_size(path) > 0);
  return std::ofstream(path, write_header ? std::ios::out | std::ios::trunc : std::ios::out | std::ios::app);
}

}  // namespace

FitReport fit(TrainRun& run, const ImageSet& train, const ImageSet& val, const FitOptions& options) {
  const auto& cfg = run.config();
  if (options.run_dir.empty()) throw std::invalid_argument("fit: run_dir is required");
  fs::create_directories(options.run_dir);
  FitReport report;
  report.best_checkpoint = options.run_dir / "best.pt";
  report.last_checkpoint = options.run_dir / "last.pt";

  if (run.epoch() >= cfg.epochs) {
    run.save_checkpoint(report.last_checkpoint);
    if (!fs::exists(report.best_checkpoint)) run.save_checkpoint(report.best_checkpoint);
    return report;
  }
  if (train.size() < 2) throw std::invalid_argument("fit: the training split needs at least two images");
  check_image_tensor(train.images, "training images");

  const bool resume = run.iteration() > 0;
  if (!resume || !fs::exists(report.last_checkpoint)) run.save_checkpoint(report.last_checkpoint);

  // embedders are frozen, so clean embeddings are computed once
  std::vector<torch::Tensor> cache;
  for (const auto& e : run.embedders()) cache.push_back(embed_all(*e, train.images));

  bool header = true;
  auto loss_file = open_log(options.run_dir / "losses.csv", resume, header);
  LossLog loss_log(loss_file, cfg.embedders, header);
  auto epoch_file = open_log(options.run_dir / "epochs.csv", resume, header);
  const auto& eval_embs = options.eval_embedders.empty() ? run.embedders() : options.eval_embedders;
  if (header) {
    epoch_file << "epoch,iterations,train_total,train_identity,train_mse,val_psnr,val_ssim";
    for (const auto& e : eval_embs) epoch_file << ",val_cosine_" << e->name();
    epoch_file << ",composite,seconds\n";
  }
  std::ofstream weight_file;
  std::optional<dlw::WeightLog> weight_log;
  if (cfg.session().kind == SessionKind::Dlw && cfg.log_weights) {
    weight_file = open_log(options.run_dir / "weights.csv", resume, header);
    weight_log.emplace(weight_file, header);
  }

  const int64_t n = train.size();
  while (run.epoch() < cfg.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    const int64_t epoch = run.epoch();
    std::vector<int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 shuffle_rng(seq);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_total = 0.0, sum_identity = 0.0, sum_mse = 0.0;
    int64_t steps = 0;
    for (int64_t s = 0; s < n; s += cfg.batch_size) {
      const int64_t e = std::min(n, s + cfg.batch_size);
      if (e - s < 2) break;  // batch norm needs two samples
      auto idx = torch::tensor(std::vector<int64_t>(order.begin() + s, order.begin() + e), torch::kInt64);
      std::vector<torch::Tensor> clean;
      for (const auto& c : cache) clean.push_back(c.index_select(0, idx));
      const auto m = run.train_step(train.images.index_select(0, idx), clean);
      loss_log.append(m);
      if (weight_log && run.last_dlw_step()) weight_log->append(m.epoch, m.iteration, *run.last_dlw_step());
      sum_total += m.total;
      sum_identity += m.identity;
      sum_mse += m.mse;
      ++steps;
    }
    loss_file.flush();

    auto metrics = run.validate(val, eval_embs);
    metrics.iterations = steps;
    if (steps > 0) {
      metrics.train_total = sum_total / static_cast<double>(steps);
      metrics.train_identity = sum_identity / static_cast<double>(steps);
      metrics.train_mse = sum_mse / static_cast<double>(steps);
    }
    metrics.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.end_epoch(metrics);
    const bool best = metrics.composite > run.best_score();
    if (best) {
      run.note_best(metrics.composite);
      run.save_checkpoint(report.best_checkpoint);
      report.best_epoch = epoch;
    }
    run.save_checkpoint(report.last_checkpoint);
    report.epochs.push_back(metrics);

    epoch_file << metrics.epoch << ',' << metrics.iterations << ',' << format_number(metrics.train_total) << ','
               << format_number(metrics.train_identity) << ',' << format_number(metrics.train_mse) << ','
               << format_number(metrics.val_psnr) << ',' << format_number(metrics.val_ssim);
    for (double c : metrics.val_cosine) epoch_file << ',' << format_number(c);
    epoch_file << ',' << format_number(metrics.composite) << ',' << format_number(metrics.seconds) << '\n';
    epoch_file.flush();

    if (options.progress) {
      auto& log = *options.progress;
      const auto flags = log.flags();
      const auto precision = log.precision();
      log << "epoch " << metrics.epoch << ": psnr " << std::fixed << std::setprecision(2) << metrics.val_psnr
          << " dB, cosine";
      for (std::size_t i = 0; i < metrics.val_cosine.size(); ++i) {
        log << ' ' << metrics.embedder_names[i] << '=' << std::setprecision(3) << metrics.val_cosine[i];
      }
      log << ", mse " << std::setprecision(4) << metrics.train_mse << ", " << std::setprecision(1) << metrics.seconds
          << " s" << (best ? " *" : "") << '\n';
      log.flags(flags);
      log.precision(precision);
    }
    if (options.on_epoch) options.on_epoch(metrics);
  }
  if (!fs::exists(report.best_checkpoint)) run.save_checkpoint(report.best_checkpoint);
  return report;
}

}  // namespace nullswap
