#include "nullswap/dlw.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace nullswap::dlw {

namespace {

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw std::invalid_argument(std::string("dlw config: ") + name + " must be a positive finite number");
  }
}

}  // namespace

void DlwConfig::validate() const {
  require_positive(alpha, "alpha");
  require_positive(beta_init, "beta_init");
  require_positive(beta_cap, "beta_cap");
  require_positive(beta_rate, "beta_rate");
  require_positive(eps_denom, "eps_denom");
  require_positive(eps_weight, "eps_weight");
  require_positive(eps_progress, "eps_progress");
  if (window < 1) throw std::invalid_argument("dlw config: window must be >= 1");
  if (epoch_cap < 1) throw std::invalid_argument("dlw config: epoch_cap must be >= 1");
  if (beta_cap < beta_init) throw std::invalid_argument("dlw config: beta_cap must be >= beta_init");
}

void to_json(nlohmann::json& j, const DlwConfig& c) {
  j = {{"alpha", c.alpha},           {"beta_init", c.beta_init},   {"beta_cap", c.beta_cap},
       {"beta_rate", c.beta_rate},   {"window", c.window},         {"epoch_cap", c.epoch_cap},
       {"eps_denom", c.eps_denom},   {"eps_weight", c.eps_weight}, {"eps_progress", c.eps_progress}};
}

void from_json(const nlohmann::json& j, DlwConfig& c) {
  j.at("alpha").get_to(c.alpha);
  j.at("beta_init").get_to(c.beta_init);
  j.at("beta_cap").get_to(c.beta_cap);
  j.at("beta_rate").get_to(c.beta_rate);
  j.at("window").get_to(c.window);
  j.at("epoch_cap").get_to(c.epoch_cap);
  j.at("eps_denom").get_to(c.eps_denom);
  j.at("eps_weight").get_to(c.eps_weight);
  j.at("eps_progress").get_to(c.eps_progress);
}

LossHistoryBank::LossHistoryBank(std::size_t num_objectives, std::int64_t retain)
    : histories_(num_objectives), retain_(std::max<std::int64_t>(retain, 2)) {
  if (num_objectives == 0) throw std::invalid_argument("loss history bank needs at least one objective");
}

void LossHistoryBank::record(std::span<const double> values, std::int64_t epoch, std::int64_t iteration) {
  if (values.size() != histories_.size()) {
    throw std::invalid_argument("loss history bank: expected " + std::to_string(histories_.size()) +
                                " loss values, got " + std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::invalid_argument("loss history bank: non-finite loss for objective " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& h = histories_[i];
    h.push_back(values[i]);
    while (static_cast<std::int64_t>(h.size()) > retain_) h.pop_front();
  }
  ++recorded_;
  epoch_ = epoch;
  iteration_ = iteration;
}

std::vector<double> LossHistoryBank::history(std::size_t objective) const {
  const auto& h = histories_.at(objective);
  return {h.begin(), h.end()};
}

double LossHistoryBank::latest(std::size_t objective) const {
  const auto& h = histories_.at(objective);
  if (h.empty()) throw std::logic_error("loss history bank: no values recorded");
  return h.back();
}

void to_json(nlohmann::json& j, const LossHistoryBank& b) {
  auto hist = nlohmann::json::array();
  for (const auto& h : b.histories_) hist.push_back(std::vector<double>(h.begin(), h.end()));
  j = {{"num_objectives", b.histories_.size()},
       {"retain", b.retain_},
       {"recorded", b.recorded_},
       {"epoch", b.epoch_},
       {"iteration", b.iteration_},
       {"histories", hist}};
}

LossHistoryBank LossHistoryBank::from_json(const nlohmann::json& j) {
  LossHistoryBank bank(j.at("num_objectives").get<std::size_t>(), j.at("retain").get<std::int64_t>());
  const auto& hist = j.at("histories");
  if (hist.size() != bank.histories_.size()) throw std::invalid_argument("loss history bank: histories size mismatch");
  for (std::size_t i = 0; i < hist.size(); ++i) {
    auto values = hist[i].get<std::vector<double>>();
    bank.histories_[i].assign(values.begin(), values.end());
  }
  bank.recorded_ = j.at("recorded").get<std::int64_t>();
  bank.epoch_ = j.at("epoch").get<std::int64_t>();
  bank.iteration_ = j.at("iteration").get<std::int64_t>();
  return bank;
}

double loss_variance(std::span<const double> history, std::int64_t window) {
  if (history.empty()) throw std::invalid_argument("loss_variance: empty history");
  const auto k = static_cast<std::size_t>(std::clamp<std::int64_t>(window, 1, static_cast<std::int64_t>(history.size())));
  if (k < 2) return 0.0;
  auto recent = history.last(k);
  // Shifted by the oldest value so a constant window is exactly zero.
  const double shift = recent.front();
  double mean = 0.0;
  for (double v : recent) mean += v - shift;
  mean /= static_cast<double>(k);
  double sq = 0.0;
  for (double v : recent) sq += (v - shift - mean) * (v - shift - mean);
  return sq / static_cast<double>(k);
}

double relative_progress(std::span<const double> history, double eps_progress) {
  if (history.size() < 2) return 0.0;
  const double prev = history[history.size() - 2];
  const double cur = history.back();
  const double denom = prev + eps_progress;
  // A previous loss of exactly -eps_progress leaves the ratio undefined.
  if (denom == 0.0) return 0.0;
  const double delta = (prev - cur) / denom;
  if (!std::isfinite(delta)) return 0.0;
  return std::max(delta, -1.0);
}

double beta_schedule(std::int64_t epoch, const DlwConfig& config) {
  const auto capped = static_cast<double>(std::min(std::max<std::int64_t>(epoch, 0), config.epoch_cap));
  return std::min(config.beta_init + config.beta_rate * capped, config.beta_cap);
}

double raw_weight(double variance, double progress, double beta, const DlwConfig& config) {
  const double denom = config.alpha * variance + beta * (1.0 + progress);
  return std::max(1.0 / std::max(denom, config.eps_denom), config.eps_weight);
}

std::vector<double> normalized_weights(std::span<const double> raw) {
  if (raw.empty()) throw std::invalid_argument("normalized_weights: no weights");
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("normalized_weights: weights must be positive");
  const double c = static_cast<double>(raw.size());
  std::vector<double> out(raw.size());
  std::transform(raw.begin(), raw.end(), out.begin(), [&](double w) { return c * w / total; });
  return out;
}

WeightedIdentityLoss weighted_identity_loss(const LossHistoryBank& bank, std::span<const double> current_losses,
                                            const DlwConfig& config) {
  const std::size_t c = bank.num_objectives();
  if (current_losses.size() != c) {
    throw std::invalid_argument("weighted_identity_loss: expected " + std::to_string(c) + " losses");
  }
  WeightedIdentityLoss out;
  out.beta = beta_schedule(bank.current_epoch(), config);
  out.objectives.resize(c);
  out.weights.raw.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    const auto h = bank.history(i);
    auto& s = out.objectives[i];
    s.loss = current_losses[i];
    s.variance = loss_variance(h, config.window);
    s.progress = relative_progress(h, config.eps_progress);
    s.raw_weight = raw_weight(s.variance, s.progress, out.beta, config);
    out.weights.raw[i] = s.raw_weight;
  }
  out.weights.normalized = normalized_weights(out.weights.raw);
  for (std::size_t i = 0; i < c; ++i) {
    out.objectives[i].normalized_weight = out.weights.normalized[i];
    out.value += out.weights.normalized[i] * current_losses[i];
  }
  return out;
}

WeightLog::WeightLog(std::ostream& out, bool write_header) : out_(out) {
  if (write_header) out_ << "epoch,iteration,objective_id,loss,variance,progress,beta,raw_weight,normalized_weight\n";
}

void WeightLog::append(std::int64_t epoch, std::int64_t iteration, const WeightedIdentityLoss& step) {
  const auto old_precision = out_.precision(10);
  for (std::size_t i = 0; i < step.objectives.size(); ++i) {
    const auto& s = step.objectives[i];
    out_ << epoch << ',' << iteration << ',' << i << ',' << s.loss << ',' << s.variance << ',' << s.progress << ','
         << step.beta << ',' << s.raw_weight << ',' << s.normalized_weight << '\n';
  }
  out_.precision(old_precision);
}

}  // namespace nullswap::dlw
