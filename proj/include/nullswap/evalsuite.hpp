#pragma once

// Evaluation protocols: visual quality of cloaked images, top-k identity
// matching against an enrolled gallery, and face-swap nullification through a
// pluggable swapper.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "nullswap/embedders.hpp"
#include "nullswap/losses.hpp"

namespace nullswap {

// --- visual quality ---------------------------------------------------------

/// PSNR in dB of two images in [0, 1]; +inf for identical inputs.
double psnr(const torch::Tensor& a, const torch::Tensor& b);
/// Mean SSIM over channels and the valid region, 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1. Inputs [3,H,W] or
/// [B,3,H,W] in [0, 1]; a batch is averaged.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

struct QualityScores {
  double psnr = 0.0;
  double ssim = 0.0;
  double perceptual = 0.0;  // NaN when no perceptual net is supplied
};

/// Scores one image pair given in [0, 1]. The perceptual distance is
/// computed on the [-1, 1] mapping the perceptual net was trained on.
QualityScores image_quality(const torch::Tensor& clean, const torch::Tensor& cloaked,
                            PerceptualNet* perceptual = nullptr);

struct QualitySummary {
  double mean_psnr = 0.0;   // over finite values only
  int64_t infinite_psnr = 0;
  double mean_ssim = 0.0;
  double mean_perceptual = 0.0;
  int64_t images = 0;
};

/// Per-image scores of two [N,3,H,W] batches in [-1, 1], averaged.
QualitySummary summarize_quality(const torch::Tensor& clean, const torch::Tensor& cloaked,
                                 PerceptualNet* perceptual = nullptr);

// --- identity matching --------------------------------------------------------

/// Per-identity prototype embeddings. A probe whose key is enrolled is
/// matched against its identity's prototype with that image left out.
class Gallery {
 public:
  /// embeddings: [N, D] unit rows, one per enrolled image.
  void enroll(const torch::Tensor& embeddings, const std::vector<int64_t>& identities,
              const std::vector<std::string>& keys);

  std::vector<int64_t> identities() const;
  std::size_t size() const { return sums_.size(); }
  bool contains(int64_t identity) const { return sums_.count(identity) > 0; }
  /// Unit-renormalized mean embedding, optionally excluding one enrolled key.
  /// Returns nullopt when the exclusion leaves the identity empty, and a zero
  /// vector when the embeddings sum to zero.
  std::optional<torch::Tensor> prototype(int64_t identity, const std::string& exclude_key = {}) const;

 private:
  std::map<int64_t, torch::Tensor> sums_;            // [D] in float64
  std::map<int64_t, int64_t> counts_;
  std::map<std::string, std::pair<int64_t, torch::Tensor>> members_;
};

struct ProbeSet {
  torch::Tensor embeddings;            // [N, D]
  std::vector<int64_t> identities;
  std::vector<std::string> keys;       // used for leave-one-out exclusion
};

/// Fraction of probes whose identity ranks within the top k by cosine to the
/// prototypes. Ties are resolved in the probe's favour (rank = number of
/// identities with a strictly higher score). Throws std::invalid_argument
/// for a probe identity not in the gallery.
double topk_accuracy(const Gallery& gallery, const ProbeSet& probes, int64_t k);

/// Embeds `images` ([N,3,H,W] in [-1, 1]) in batches without gradient.
torch::Tensor embed_all(const FaceEmbedder& embedder, const torch::Tensor& images, int64_t batch = 64);

// --- swap nullification ---------------------------------------------------------

/// Face-swap plugin: (source, target) -> swapped image, all [3,H,W] in [-1, 1].
/// Throws on failure; the harness records the pair as failed.
class FaceSwapAdapter {
 public:
  virtual ~FaceSwapAdapter() = default;
  virtual std::string name() const = 0;
  virtual torch::Tensor swap(const torch::Tensor& source, const torch::Tensor& target) = 0;
};

/// Returns the source unchanged.
class IdentitySwapAdapter : public FaceSwapAdapter {
 public:
  std::string name() const override { return "identity"; }
  torch::Tensor swap(const torch::Tensor& source, const torch::Tensor&) override { return source; }
};

class CallableSwapAdapter : public FaceSwapAdapter {
 public:
  using Fn = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;
  CallableSwapAdapter(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
  std::string name() const override { return name_; }
  torch::Tensor swap(const torch::Tensor& s, const torch::Tensor& t) override { return fn_(s, t); }

 private:
  std::string name_;
  Fn fn_;
};

/// Runs an external program as `<command...> <source.png> <target.png> <output.png>`
/// and reads the output PNG. The process is killed after `timeout`.
class ExecutableSwapAdapter : public FaceSwapAdapter {
 public:
  ExecutableSwapAdapter(std::string name, std::vector<std::string> command, std::chrono::milliseconds timeout,
                        std::filesystem::path work_dir);
  std::string name() const override { return name_; }
  torch::Tensor swap(const torch::Tensor& source, const torch::Tensor& target) override;

 private:
  std::string name_;
  std::vector<std::string> command_;
  std::chrono::milliseconds timeout_;
  std::filesystem::path work_dir_;
  int64_t calls_ = 0;
};

struct NullificationResult {
  double mean_cosine = 0.0;  // NaN when no pair succeeded
  int64_t pairs = 0;
  int64_t succeeded = 0;
  std::vector<std::string> failures;  // "pair <i>: <reason>"
};

/// Mean cosine between embeddings of swap(clean_i, target_i) and
/// swap(perturbed_i, target_i). Inputs are [N,3,H,W] in [-1, 1].
NullificationResult swap_nullification(FaceSwapAdapter& swapper, const torch::Tensor& sources_clean,
                                       const torch::Tensor& sources_perturbed, const torch::Tensor& targets,
                                       const FaceEmbedder& embedder);

// --- reports ------------------------------------------------------------------

/// A metric table: rows keyed by a label, one numeric column per metric name.
/// Cells are written in insertion order; NaN/inf become "nan"/"inf".
struct MetricTable {
  std::string metric;                      // used in the file name
  std::vector<std::string> key_columns;    // e.g. {"embedder", "source"}
  std::vector<std::string> value_columns;  // e.g. {"top1", "top5"}
  struct Row {
    std::vector<std::string> keys;
    std::vector<double> values;
  };
  std::vector<Row> rows;

  void add(std::vector<std::string> keys, std::vector<double> values);
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

struct EvalReport {
  std::string dataset;
  std::string checkpoint_hash;
  std::string split;
  std::vector<MetricTable> tables;
  nlohmann::json provenance = nlohmann::json::object();
};

/// Writes `{dataset}_{checkpoint-hash}_{metric}.csv` per table plus
/// `{dataset}_{checkpoint-hash}_report.json`. Returns the written paths.
std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& out_dir);

/// Formats a double for CSV output: shortest round-trip form, "inf"/"nan".
std::string format_number(double v);

}  // namespace nullswap
