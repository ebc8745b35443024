#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "dlw_oracle.hpp"
#include "nullswap/dlw.hpp"

using namespace nullswap::dlw;

namespace {

LossHistoryBank bank_from(const std::vector<std::vector<double>>& streams, std::int64_t epoch = 0) {
  LossHistoryBank bank(streams.size(), 30);
  for (std::size_t t = 0; t < streams[0].size(); ++t) {
    std::vector<double> row;
    for (const auto& s : streams) row.push_back(s[t]);
    bank.record(row, epoch, static_cast<std::int64_t>(t));
  }
  return bank;
}

std::vector<double> latest_row(const std::vector<std::vector<double>>& streams) {
  std::vector<double> row;
  for (const auto& s : streams) row.push_back(s.back());
  return row;
}

}  // namespace

TEST(DlwConfig, DefaultsValidate) {
  DlwConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_DOUBLE_EQ(c.alpha, 3.0);
  EXPECT_DOUBLE_EQ(c.beta_init, 0.5);
  EXPECT_DOUBLE_EQ(c.beta_cap, 2.0);
  EXPECT_DOUBLE_EQ(c.beta_rate, 0.1);
  EXPECT_EQ(c.window, 30);
}

TEST(DlwConfig, RejectsBadFields) {
  DlwConfig c;
  c.beta_cap = 0.4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.window = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.eps_denom = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(RecordLosses, FirstRecord) {
  LossHistoryBank bank(2, 30);
  std::vector<double> v{1.0, 2.0};
  bank.record(v, 0, 0);
  EXPECT_EQ(bank.history(0), std::vector<double>{1.0});
  EXPECT_EQ(bank.history(1), std::vector<double>{2.0});
  EXPECT_EQ(bank.current_epoch(), 0);
  EXPECT_EQ(bank.current_iteration(), 0);
}

TEST(RecordLosses, WindowTruncatesStorage) {
  LossHistoryBank bank(1, 30);
  for (int t = 0; t < 45; ++t) {
    std::vector<double> v{static_cast<double>(t)};
    bank.record(v, 0, t);
  }
  EXPECT_EQ(bank.history(0).size(), 30u);
  EXPECT_EQ(bank.history(0).front(), 15.0);
  EXPECT_EQ(bank.recorded(), 45);
}

TEST(RecordLosses, NonFiniteNamesObjective) {
  LossHistoryBank bank(2, 30);
  std::vector<double> v{1.0, std::numeric_limits<double>::quiet_NaN()};
  try {
    bank.record(v, 0, 0);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("objective 1"), std::string::npos);
  }
  EXPECT_EQ(bank.recorded(), 0);
}

TEST(RecordLosses, SizeMismatch) {
  LossHistoryBank bank(2, 30);
  std::vector<double> v{1.0};
  EXPECT_THROW(bank.record(v, 0, 0), std::invalid_argument);
}

TEST(LossVariance, Examples) {
  std::vector<double> constant{0.7, 0.7, 0.7};
  EXPECT_DOUBLE_EQ(loss_variance(constant, 3), 0.0);
  std::vector<double> falling{2.0, 1.0, 0.5};
  EXPECT_NEAR(loss_variance(falling, 3), 0.388889, 1e-6);
  std::vector<double> single{5.0};
  EXPECT_DOUBLE_EQ(loss_variance(single, 30), 0.0);
  EXPECT_THROW(loss_variance(std::vector<double>{}, 3), std::invalid_argument);
}

TEST(LossVariance, UsesOnlyRecentWindow) {
  std::vector<double> h{100.0, -50.0, 1.0, 1.0, 1.0};
  EXPECT_DOUBLE_EQ(loss_variance(h, 3), 0.0);
  EXPECT_GT(loss_variance(h, 5), 0.0);
}

TEST(RelativeProgress, Examples) {
  EXPECT_DOUBLE_EQ(relative_progress(std::vector<double>{2.0, 1.0, 1.0}, 1e-6), 0.0);
  EXPECT_NEAR(relative_progress(std::vector<double>{1.0, 0.5}, 1e-6), 0.5 / (1.0 + 1e-6), 1e-15);
  EXPECT_DOUBLE_EQ(relative_progress(std::vector<double>{1.0, 3.0}, 1e-6), -1.0);
  EXPECT_DOUBLE_EQ(relative_progress(std::vector<double>{4.0}, 1e-6), 0.0);
}

TEST(RelativeProgress, UndefinedRatioIsNeutral) {
  EXPECT_DOUBLE_EQ(relative_progress(std::vector<double>{-1e-6, 0.3}, 1e-6), 0.0);
}

TEST(BetaSchedule, Examples) {
  DlwConfig c;
  EXPECT_DOUBLE_EQ(beta_schedule(0, c), 0.5);
  EXPECT_NEAR(beta_schedule(5, c), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(beta_schedule(100, c), 2.0);
}

TEST(BetaSchedule, MonotoneAndCapped) {
  DlwConfig c;
  double prev = beta_schedule(0, c);
  for (int e = 1; e < 200; ++e) {
    const double b = beta_schedule(e, c);
    EXPECT_GE(b, prev);
    EXPECT_LE(b, c.beta_cap);
    prev = b;
  }
}

TEST(RawWeight, Examples) {
  DlwConfig c;
  EXPECT_DOUBLE_EQ(raw_weight(0.0, 0.0, 0.5, c), 2.0);
  EXPECT_DOUBLE_EQ(raw_weight(0.0, -1.0, 0.5, c), 1e6);
  EXPECT_NEAR(raw_weight(0.388889, 0.5, 0.5, c), 0.521739, 1e-5);
}

TEST(RawWeight, DirectionalProperties) {
  DlwConfig c;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> var(0.0, 2.0), prog(-1.0, 3.0), beta(0.5, 2.0);
  for (int i = 0; i < 500; ++i) {
    const double v = var(rng), p = prog(rng), b = beta(rng);
    EXPECT_GE(raw_weight(v, p, b, c), c.eps_weight);
    EXPECT_GT(raw_weight(v, p, b, c), raw_weight(v + 0.1, p, b, c));
    EXPECT_GT(raw_weight(v, p, b, c), raw_weight(v, p + 0.1, b, c));
  }
}

TEST(NormalizedWeights, Examples) {
  auto eq = normalized_weights(std::vector<double>{2.0, 2.0});
  EXPECT_DOUBLE_EQ(eq[0], 1.0);
  EXPECT_DOUBLE_EQ(eq[1], 1.0);
  auto uneq = normalized_weights(std::vector<double>{2.0, 0.521739});
  EXPECT_NEAR(uneq[0], 1.586207, 1e-5);
  EXPECT_NEAR(uneq[1], 0.413793, 1e-5);
  EXPECT_NEAR(uneq[0] + uneq[1], 2.0, 1e-12);
  auto one = normalized_weights(std::vector<double>{5.0});
  EXPECT_DOUBLE_EQ(one[0], 1.0);
}

TEST(WeightedIdentityLoss, ConstantHistories) {
  auto streams = std::vector<std::vector<double>>{{0.3, 0.3, 0.3}, {0.3, 0.3, 0.3}};
  auto bank = bank_from(streams);
  auto r = weighted_identity_loss(bank, latest_row(streams), DlwConfig{});
  EXPECT_DOUBLE_EQ(r.weights.normalized[0], 1.0);
  EXPECT_DOUBLE_EQ(r.weights.normalized[1], 1.0);
  EXPECT_NEAR(r.value, 0.6, 1e-12);
}

TEST(WeightedIdentityLoss, HandComputedCase) {
  auto streams = std::vector<std::vector<double>>{{1.0, 1.0, 1.0}, {2.0, 1.0, 0.5}};
  auto bank = bank_from(streams);
  auto r = weighted_identity_loss(bank, latest_row(streams), DlwConfig{});
  EXPECT_NEAR(r.weights.normalized[0], 1.586207, 1e-4);
  EXPECT_NEAR(r.weights.normalized[1], 0.413793, 1e-4);
  EXPECT_NEAR(r.value, 1.793103, 1e-4);
}

TEST(WeightedIdentityLoss, SingleObjectiveIsPassThrough) {
  auto streams = std::vector<std::vector<double>>{{0.9, 0.2, 0.7, 0.4}};
  auto bank = bank_from(streams, 3);
  auto r = weighted_identity_loss(bank, latest_row(streams), DlwConfig{});
  EXPECT_DOUBLE_EQ(r.weights.normalized[0], 1.0);
  EXPECT_DOUBLE_EQ(r.value, 0.4);
}

TEST(WeightedIdentityLoss, MatchesOracleOnRandomStreams) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> loss(0.01, 10.0);
  nullswap::testing::OracleConstants k;
  DlwConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + trial % 4;
    const std::size_t len = 1 + static_cast<std::size_t>(rng() % 80);
    std::vector<std::vector<double>> streams(c, std::vector<double>(len));
    for (auto& s : streams)
      for (auto& v : s) v = loss(rng);
    LossHistoryBank bank(c, cfg.window);
    for (std::size_t t = 0; t < len; ++t) {
      const std::int64_t epoch = static_cast<std::int64_t>(t / 10);
      std::vector<double> row;
      for (const auto& s : streams) row.push_back(s[t]);
      bank.record(row, epoch, static_cast<std::int64_t>(t));
      auto got = weighted_identity_loss(bank, row, cfg);
      auto want = nullswap::testing::oracle_dlw_step(streams, t, epoch, k);
      for (std::size_t i = 0; i < c; ++i) {
        EXPECT_NEAR(got.weights.normalized[i], want.normalized[i], 1e-9 * std::abs(want.normalized[i]));
      }
      EXPECT_NEAR(got.value, want.identity_loss, 1e-9 * std::abs(want.identity_loss));
    }
  }
}

TEST(LossHistoryBank, JsonRoundTripPreservesNextWeights) {
  auto streams = std::vector<std::vector<double>>{{0.9, 0.5, 0.45, 0.1}, {0.8, 0.79, 0.7, 0.72}};
  auto bank = bank_from(streams, 2);
  nlohmann::json j = bank;
  auto restored = LossHistoryBank::from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(restored, bank);
  std::vector<double> next{0.05, 0.69};
  bank.record(next, 2, 4);
  restored.record(next, 2, 4);
  auto a = weighted_identity_loss(bank, next, DlwConfig{});
  auto b = weighted_identity_loss(restored, next, DlwConfig{});
  EXPECT_EQ(a.weights.normalized, b.weights.normalized);
  EXPECT_EQ(a.value, b.value);
}

TEST(WeightLog, WritesHeaderAndOneRowPerObjective) {
  std::ostringstream os;
  WeightLog log(os);
  auto streams = std::vector<std::vector<double>>{{1.0, 1.0, 1.0}, {2.0, 1.0, 0.5}};
  auto bank = bank_from(streams);
  log.append(0, 2, weighted_identity_loss(bank, latest_row(streams), DlwConfig{}));
  std::string text = os.str();
  EXPECT_EQ(text.rfind("epoch,iteration,objective_id,loss,variance,progress,beta,raw_weight,normalized_weight\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
