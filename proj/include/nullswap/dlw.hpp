#pragma once

// Dynamic Loss Weighting: adaptive per-iteration weights for several identity
// losses, driven only by the recorded scalar loss values.
//
// For objective i at iteration t_b of epoch t_e:
//
//   sigma2_i  = population variance of the last min(k, n) recorded values
//   delta_i   = max((L_i(t_b-1) - L_i(t_b)) / (L_i(t_b-1) + eps_p), -1)
//   beta(t_e) = min(beta_init + rate * min(t_e, epoch_cap), beta_cap)
//   w_i       = max(1 / max(alpha * sigma2_i + beta * (1 + delta_i), eps_d), eps_w)
//   w_hat_i   = c * w_i / sum_j w_j
//   L_id      = sum_i w_hat_i * L_i(t_b)
//
// Weights are plain doubles. When they scale autograd tensors they enter the
// graph as constants.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace nullswap::dlw {

struct DlwConfig {
  double alpha = 3.0;
  double beta_init = 0.5;
  double beta_cap = 2.0;
  double beta_rate = 0.1;
  std::int64_t window = 30;
  std::int64_t epoch_cap = 15;
  double eps_denom = 1e-6;
  double eps_weight = 1e-6;
  double eps_progress = 1e-6;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const DlwConfig& c);
void from_json(const nlohmann::json& j, DlwConfig& c);

struct WeightVector {
  std::vector<double> raw;
  std::vector<double> normalized;
};

/// Per-objective quantities behind one weight computation; used for logging.
struct ObjectiveStats {
  double loss = 0.0;
  double variance = 0.0;
  double progress = 0.0;
  double raw_weight = 0.0;
  double normalized_weight = 0.0;
};

struct WeightedIdentityLoss {
  double value = 0.0;
  double beta = 0.0;
  WeightVector weights;
  std::vector<ObjectiveStats> objectives;
};

class LossHistoryBank {
 public:
  /// `retain` is the number of most-recent values kept per objective; it is
  /// raised to at least 2 so relative progress stays computable.
  LossHistoryBank(std::size_t num_objectives, std::int64_t retain);

  /// Appends one value per objective. Rejects a non-finite value or a size
  /// mismatch with std::invalid_argument; the bank is unchanged on error.
  void record(std::span<const double> values, std::int64_t epoch, std::int64_t iteration);

  std::size_t num_objectives() const { return histories_.size(); }
  /// Number of record() calls so far, including values already truncated.
  std::int64_t recorded() const { return recorded_; }
  std::int64_t current_epoch() const { return epoch_; }
  std::int64_t current_iteration() const { return iteration_; }
  std::int64_t retain() const { return retain_; }

  /// Retained values for objective i, oldest first.
  std::vector<double> history(std::size_t objective) const;
  double latest(std::size_t objective) const;

  friend void to_json(nlohmann::json& j, const LossHistoryBank& b);
  static LossHistoryBank from_json(const nlohmann::json& j);

  bool operator==(const LossHistoryBank&) const = default;

 private:
  std::vector<std::deque<double>> histories_;
  std::int64_t retain_;
  std::int64_t recorded_ = 0;
  std::int64_t epoch_ = 0;
  std::int64_t iteration_ = -1;
};

double loss_variance(std::span<const double> history, std::int64_t window);
double relative_progress(std::span<const double> history, double eps_progress);
double beta_schedule(std::int64_t epoch, const DlwConfig& config);
double raw_weight(double variance, double progress, double beta, const DlwConfig& config);
std::vector<double> normalized_weights(std::span<const double> raw);

/// Computes the DLW-weighted identity loss for the current iteration. The bank
/// must already contain `current_losses` as its latest record.
WeightedIdentityLoss weighted_identity_loss(const LossHistoryBank& bank,
                                            std::span<const double> current_losses,
                                            const DlwConfig& config);

/// Optional CSV log with one row per objective per iteration.
class WeightLog {
 public:
  explicit WeightLog(std::ostream& out, bool write_header = true);
  void append(std::int64_t epoch, std::int64_t iteration, const WeightedIdentityLoss& step);

 private:
  std::ostream& out_;
};

}  // namespace nullswap::dlw
