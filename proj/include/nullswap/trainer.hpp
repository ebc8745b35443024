#pragma once

// Alternating generator/discriminator training with the identity term
// aggregated per session mode, plus checkpointing and per-epoch validation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "nullswap/config.hpp"
#include "nullswap/data.hpp"
#include "nullswap/dlw.hpp"
#include "nullswap/embedders.hpp"
#include "nullswap/losses.hpp"
#include "nullswap/netblocks.hpp"

namespace nullswap {

enum class SessionKind { Single, Average, Dlw };

struct SessionMode {
  SessionKind kind = SessionKind::Dlw;
  std::string embedder;  // only for Single

  /// "single:<name>", "average" or "dlw".
  static SessionMode parse(const std::string& text);
  std::string str() const;
};

struct TrainConfig {
  double lr_generator = 5e-4;
  double lr_discriminator = 1e-4;
  int64_t epochs = 60;
  int64_t batch_size = 16;
  int64_t image_size = 256;
  std::string session_mode = "dlw";
  std::uint64_t seed = 0;
  double grad_clip = 5.0;
  LossCoefficients coefficients;
  dlw::DlwConfig dlw;
  GeneratorConfig generator;

  // embedders driving the identity loss, and the ones reported at validation
  std::vector<std::string> embedders{"A", "B"};
  std::vector<std::string> eval_embedders;  // empty = same as `embedders`

  // used by the command-line front end, ignored by TrainRun itself
  std::string dataset;
  std::string run_dir = "runs/default";
  std::string perceptual_weights;          // empty = toy net trained on the dataset
  std::vector<std::string> pretrained_embedders;  // "name=path:dim:input_size"
  int64_t toy_embedder_epochs = 20;
  bool log_weights = true;

  SessionMode session() const { return SessionMode::parse(session_mode); }

  /// Throws ConfigError describing every violated invariant.
  void validate() const;
  /// Applies one key; unknown keys and type mismatches throw ConfigError.
  void set(const std::string& key, const ConfigValue& value);
  void apply(const ConfigDocument& doc);
  /// Same keys as the config file.
  ConfigDocument to_document() const;
  std::string to_toml() const;

  static TrainConfig from_file(const std::filesystem::path& path);
  /// Small profile for CPU runs: 64x64 images, 32 base channels.
  static TrainConfig toy();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
/// Hash of the canonical JSON form.
std::string config_hash(const TrainConfig& c);

struct IterationMetrics {
  int64_t epoch = 0;
  int64_t iteration = 0;
  double identity = 0.0;                 // aggregated identity term
  std::vector<double> identity_per_embedder;  // NaN for embedders not evaluated
  std::vector<double> weights;           // per-embedder weight in the identity term
  double mse = 0.0;
  double perceptual = 0.0;
  double adversarial = 0.0;
  double total = 0.0;
  double discriminator = 0.0;
};

struct EpochMetrics {
  int64_t epoch = 0;
  int64_t iterations = 0;
  double train_total = 0.0;
  double train_identity = 0.0;
  double train_mse = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
  std::vector<std::string> embedder_names;
  std::vector<double> val_cosine;
  double composite = 0.0;  // val_psnr / 50 - mean(val_cosine)
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const EpochMetrics& m);
void from_json(const nlohmann::json& j, EpochMetrics& m);

struct IdentityAggregate {
  torch::Tensor value;
  std::vector<double> weights;  // one per embedder, 0 for unused ones
  std::optional<dlw::WeightedIdentityLoss> dlw_step;
};

/// Combines per-embedder cosine losses according to the session mode.
/// single: that embedder's loss (others may be undefined tensors);
/// average: unweighted mean; dlw: records 1 + cosine for every embedder in
/// `bank`, then weights the losses with the resulting normalized weights,
/// treated as constants.
IdentityAggregate aggregate_identity(const SessionMode& mode, const std::vector<std::string>& names,
                                     const std::vector<torch::Tensor>& losses, dlw::LossHistoryBank& bank,
                                     const dlw::DlwConfig& config, int64_t epoch, int64_t iteration);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& what, std::filesystem::path last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const std::filesystem::path& last_good_checkpoint() const { return last_good_; }

 private:
  std::filesystem::path last_good_;
};

class TrainRun {
 public:
  /// `embedders` are the loss embedders named in config.embedders, in order.
  /// They and the perceptual net must be frozen.
  TrainRun(TrainConfig config, std::vector<std::shared_ptr<FaceEmbedder>> embedders, PerceptualNet perceptual);

  TrainRun(TrainRun&&) = default;
  TrainRun& operator=(TrainRun&&) = default;

  const TrainConfig& config() const { return config_; }
  Generator& generator() { return generator_; }
  Discriminator& discriminator() { return discriminator_; }
  const std::vector<std::shared_ptr<FaceEmbedder>>& embedders() const { return embedders_; }
  PerceptualNet& perceptual() { return perceptual_; }
  const dlw::LossHistoryBank& bank() const { return bank_; }
  int64_t epoch() const { return epoch_; }
  /// Number of iterations completed so far; the next step gets this index.
  int64_t iteration() const { return iteration_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  const std::vector<double>& last_weights() const { return last_weights_; }
  double best_score() const { return best_score_; }
  const std::filesystem::path& last_good_checkpoint() const { return last_good_; }

  /// One generator update followed by one discriminator update on `batch`
  /// ([B,3,S,S] in [-1,1]). `clean_embeddings` optionally supplies one
  /// [B, dim] tensor per loss embedder.
  IterationMetrics train_step(const torch::Tensor& batch, const std::vector<torch::Tensor>& clean_embeddings = {});

  /// Cloaks images in deterministic mode with the generator in eval mode.
  torch::Tensor cloak(const torch::Tensor& images, int64_t batch = 64);

  /// Validation metrics on `val`, evaluated with `eval_embedders`
  /// (defaults to the loss embedders).
  EpochMetrics validate(const ImageSet& val, const std::vector<std::shared_ptr<FaceEmbedder>>& eval_embedders = {});

  /// Appends the metrics and advances the epoch cursor.
  void end_epoch(const EpochMetrics& metrics);
  void note_best(double score) { best_score_ = score; }
  const std::optional<dlw::WeightedIdentityLoss>& last_dlw_step() const { return last_dlw_step_; }

  /// Also becomes the last-good checkpoint reported by NonFiniteLoss.
  void save_checkpoint(const std::filesystem::path& path);
  static TrainRun load_checkpoint(const std::filesystem::path& path,
                                  std::vector<std::shared_ptr<FaceEmbedder>> embedders, PerceptualNet perceptual);

 private:
  void check_frozen() const;

  TrainConfig config_;
  SessionMode session_;
  std::vector<std::shared_ptr<FaceEmbedder>> embedders_;
  PerceptualNet perceptual_;
  Generator generator_{nullptr};
  Discriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  dlw::LossHistoryBank bank_;
  at::Generator rng_;
  int64_t epoch_ = 0;
  int64_t iteration_ = 0;
  std::vector<EpochMetrics> history_;
  std::vector<double> last_weights_;
  std::optional<dlw::WeightedIdentityLoss> last_dlw_step_;
  double best_score_ = -std::numeric_limits<double>::infinity();
  std::filesystem::path last_good_;
};

/// Reads only the generator from a training checkpoint (for cloaking).
Generator load_generator(const std::filesystem::path& checkpoint);

struct FitOptions {
  std::filesystem::path run_dir;  // best.pt, last.pt and CSV logs go here
  std::vector<std::shared_ptr<FaceEmbedder>> eval_embedders;  // default: loss embedders
  /// Called after every epoch; may be empty.
  std::function<void(const EpochMetrics&)> on_epoch;
  /// One progress line per epoch goes here; null keeps fit silent.
  std::ostream* progress = nullptr;
};

struct FitReport {
  std::vector<EpochMetrics> epochs;  // only the epochs run by this call
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  int64_t best_epoch = -1;
};

/// Runs epochs until run.epoch() reaches config.epochs. With epochs already
/// complete it only writes the current state as last.pt (and best.pt when
/// none exists) and returns an empty report.
FitReport fit(TrainRun& run, const ImageSet& train, const ImageSet& val, const FitOptions& options);

/// Per-iteration loss log.
class LossLog {
 public:
  LossLog(std::ostream& out, const std::vector<std::string>& embedder_names, bool write_header);
  void append(const IterationMetrics& m);

 private:
  std::ostream& out_;
};

}  // namespace nullswap
