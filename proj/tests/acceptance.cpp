// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
//   acceptance [--work DIR] [--reuse] [criterion numbers...]
//
// Without --reuse the work directory is wiped first, so every toy embedder
// and training session is rebuilt from scratch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <torch/torch.h>

#include "nullswap/checkpoint.hpp"
#include "nullswap/dlw.hpp"
#include "nullswap/evalsuite.hpp"
#include "nullswap/pipeline.hpp"
#include "nullswap/trainer.hpp"

using namespace nullswap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back((ok ? "ok: " : "FAILED: ") + what);
  }
  void note(const std::string& what) { notes.push_back(what); }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

// --- DLW oracle -----------------------------------------------------------------
// Straight-line recomputation from the full raw stream.

struct OracleStep {
  std::vector<double> normalized;
  std::vector<double> raw;
  double value;
};

OracleStep oracle_step(const std::vector<std::vector<double>>& streams, std::size_t t, int64_t epoch) {
  const double alpha = 3.0, beta_init = 0.5, beta_cap = 2.0, gamma = 0.1, eps = 1e-6;
  const std::size_t k = 30;
  const int64_t epoch_cap = 15;
  const double beta = std::min(beta_init + gamma * static_cast<double>(std::min(epoch, epoch_cap)), beta_cap);
  const std::size_t c = streams.size();
  OracleStep out;
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    const auto& s = streams[i];
    const std::size_t n = t + 1;
    const std::size_t m = std::min(k, n);
    double mean = 0.0;
    for (std::size_t j = n - m; j < n; ++j) mean += s[j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = n - m; j < n; ++j) var += (s[j] - mean) * (s[j] - mean);
    var /= static_cast<double>(m);
    double delta = 0.0;
    if (n >= 2) delta = std::max((s[t - 1] - s[t]) / (s[t - 1] + eps), -1.0);
    const double w = std::max(1.0 / std::max(alpha * var + beta * (1.0 + delta), eps), eps);
    out.raw.push_back(w);
    total += w;
  }
  out.value = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    out.normalized.push_back(static_cast<double>(c) * out.raw[i] / total);
    out.value += out.normalized.back() * streams[i][t];
  }
  return out;
}

std::vector<std::vector<double>> random_streams(std::mt19937_64& rng, std::size_t c, std::size_t len) {
  std::uniform_real_distribution<double> u(0.0, 10.0);
  std::vector<std::vector<double>> s(c);
  for (auto& v : s)
    for (std::size_t t = 0; t < len; ++t) {
      double x = 0.0;
      while (x <= 0.0) x = u(rng);  // (0, 10]
      v.push_back(x);
    }
  return s;
}

Outcome criterion_dlw_oracle() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  dlw::DlwConfig cfg;
  double worst = 0.0;
  int64_t steps = 0;
  for (int stream = 0; stream < 1000; ++stream) {
    const std::size_t c = 1 + rng() % 4;
    const std::size_t len = 1 + rng() % 200;
    const std::size_t per_epoch = 1 + rng() % 25;
    auto s = random_streams(rng, c, len);
    dlw::LossHistoryBank bank(c, cfg.window);
    for (std::size_t t = 0; t < len; ++t) {
      const auto epoch = static_cast<int64_t>(t / per_epoch);
      std::vector<double> cur;
      for (const auto& v : s) cur.push_back(v[t]);
      bank.record(cur, epoch, static_cast<int64_t>(t));
      const auto got = dlw::weighted_identity_loss(bank, cur, cfg);
      const auto want = oracle_step(s, t, epoch);
      worst = std::max(worst, rel_err(got.value, want.value));
      for (std::size_t i = 0; i < c; ++i) {
        worst = std::max(worst, rel_err(got.weights.normalized[i], want.normalized[i]));
        worst = std::max(worst, rel_err(got.weights.raw[i], want.raw[i]));
      }
      ++steps;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.check(worst <= 1e-9, "max relative error " + fmt(worst, 3) + " over " + std::to_string(steps) + " iterations");
  o.check(secs < 30.0, "runtime " + fmt(secs, 3) + " s");
  return o;
}

Outcome criterion_dlw_invariants() {
  Outcome o;
  dlw::DlwConfig cfg;
  std::mt19937_64 rng(7);
  double worst_sum = 0.0, min_raw = 1e300;
  for (int stream = 0; stream < 200; ++stream) {
    const std::size_t c = 1 + rng() % 4;
    auto s = random_streams(rng, c, 1 + rng() % 200);
    dlw::LossHistoryBank bank(c, cfg.window);
    for (std::size_t t = 0; t < s[0].size(); ++t) {
      std::vector<double> cur;
      for (const auto& v : s) cur.push_back(v[t]);
      bank.record(cur, static_cast<int64_t>(t / 10), static_cast<int64_t>(t));
      auto w = dlw::weighted_identity_loss(bank, cur, cfg);
      double sum = 0.0;
      for (double x : w.weights.normalized) sum += x;
      worst_sum = std::max(worst_sum, std::abs(sum - static_cast<double>(c)));
      for (double x : w.weights.raw) min_raw = std::min(min_raw, x);
    }
  }
  o.check(worst_sum <= 1e-9, "max |sum(w_hat) - c| = " + fmt(worst_sum, 3));
  o.check(min_raw >= cfg.eps_weight, "min raw weight " + fmt(min_raw, 6) + " >= eps_w");

  bool monotone = true;
  double prev = -1.0, top = 0.0;
  for (int64_t e = 0; e <= 200; ++e) {
    const double b = dlw::beta_schedule(e, cfg);
    if (b < prev) monotone = false;
    prev = b;
    top = std::max(top, b);
  }
  o.check(monotone && top <= 2.0, "beta non-decreasing over epochs 0..200, max " + fmt(top));

  // loss doubling each step: progress stays >= -1 and sits at the clip
  std::vector<double> doubling{1.0};
  double min_delta = 0.0;
  for (int i = 0; i < 10; ++i) {
    doubling.push_back(doubling.back() * 2.0);
    min_delta = std::min(min_delta, dlw::relative_progress(doubling, cfg.eps_progress));
  }
  const double jump = dlw::relative_progress(std::vector<double>{1.0, 3.0}, cfg.eps_progress);
  o.check(min_delta >= -1.0 && min_delta <= -1.0 + 1e-5 && jump == -1.0,
          "progress on doubling stream " + fmt(min_delta, 8) + ", on 1 -> 3 exactly " + fmt(jump));

  dlw::LossHistoryBank flat(3, cfg.window);
  bool ones = true;
  for (int t = 0; t < 40; ++t) {
    std::vector<double> v{0.3, 0.3, 0.3};
    flat.record(v, t / 10, t);
    for (double w : dlw::weighted_identity_loss(flat, v, cfg).weights.normalized) ones = ones && std::abs(w - 1.0) < 1e-12;
  }
  o.check(ones, "constant histories give w_hat = 1");
  return o;
}

Outcome criterion_dlw_hand_case() {
  Outcome o;
  dlw::DlwConfig cfg;
  dlw::LossHistoryBank bank(2, cfg.window);
  const double a[] = {1.0, 1.0, 1.0}, b[] = {2.0, 1.0, 0.5};
  for (int t = 0; t < 3; ++t) bank.record(std::vector<double>{a[t], b[t]}, 0, t);
  auto w = dlw::weighted_identity_loss(bank, std::vector<double>{1.0, 0.5}, cfg);
  o.check(std::abs(w.weights.normalized[0] - 1.586207) <= 1e-4 && std::abs(w.weights.normalized[1] - 0.413793) <= 1e-4,
          "weights " + fmt(w.weights.normalized[0], 7) + " / " + fmt(w.weights.normalized[1], 7));
  o.check(std::abs(w.value - 1.793103) <= 1e-4, "L_id " + fmt(w.value, 7));
  return o;
}

// --- generator --------------------------------------------------------------------

Outcome criterion_generator() {
  Outcome o;
  torch::NoGradGuard guard;
  GeneratorConfig gc;
  for (int64_t size : {64, 128, 256}) {
    torch::manual_seed(3);
    Generator g(gc);
    g->eval();
    auto x = torch::rand({2, 3, size, size}, at::make_generator<at::CPUGeneratorImpl>(size)) * 2 - 1;
    auto y = g->forward(x, NoiseMode::Train, at::make_generator<at::CPUGeneratorImpl>(1));
    const bool in_range = y.min().item<double>() >= -1.0 && y.max().item<double>() <= 1.0;
    o.check(y.sizes() == x.sizes() && in_range, std::to_string(size) + "x" + std::to_string(size) +
                                                    ": shape kept, range [" + fmt(y.min().item<double>()) + ", " +
                                                    fmt(y.max().item<double>()) + "]");
  }

  torch::manual_seed(4);
  Generator g(gc);
  g->eval();
  auto x = torch::rand({2, 3, 64, 64}, at::make_generator<at::CPUGeneratorImpl>(9)) * 2 - 1;
  g->cloaking->cloak_gamma.fill_(0.0);
  auto shallow = g->features->forward(x);
  auto id = g->id_extraction->forward(x);
  auto p1 = g->perturbation->forward(id, NoiseMode::Train, at::make_generator<at::CPUGeneratorImpl>(1));
  auto p2 = torch::randn_like(p1) * 5.0;
  const bool path_invariant = torch::equal(g->cloaking->forward(shallow, p1, x), g->cloaking->forward(shallow, p2, x));
  const bool noise_invariant = torch::equal(g->forward(x, NoiseMode::Train, at::make_generator<at::CPUGeneratorImpl>(1)),
                                            g->forward(x, NoiseMode::Train, at::make_generator<at::CPUGeneratorImpl>(2)));
  o.check(path_invariant && noise_invariant, "cloak_gamma = 0: output independent of the perturbation path");

  torch::manual_seed(5);
  Generator a(gc);
  torch::manual_seed(5);
  Generator b(gc);
  a->eval();
  b->eval();
  auto ya = a->forward(x, NoiseMode::Deterministic), yb = b->forward(x, NoiseMode::Deterministic);
  o.check(torch::equal(ya, yb) && torch::equal(ya, a->forward(x, NoiseMode::Deterministic)),
          "deterministic mode bitwise reproducible under a fixed seed");
  return o;
}

// --- gradients ----------------------------------------------------------------------

struct GradSetup {
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  std::vector<std::shared_ptr<FaceEmbedder>> embedders;
  PerceptualNet perceptual{nullptr};
  torch::Tensor images;
  std::vector<double> weights;  // fixed DLW weights for the identity term
  LossCoefficients coefficients;
};

torch::Tensor loss_of_output(GradSetup& s, const torch::Tensor& cloaked) {
  auto ids = identity_losses(s.embedders, s.images, cloaked);
  auto identity = ids[0] * s.weights[0];
  for (std::size_t i = 1; i < ids.size(); ++i) identity = identity + ids[i] * s.weights[i];
  LossComponents c{identity, reconstruction_loss(s.images, cloaked), perceptual_loss(s.images, cloaked, s.perceptual),
                   adversarial_loss(s.discriminator, cloaked)};
  return total_loss(c, s.coefficients);
}

torch::Tensor loss_of_generator(GradSetup& s) {
  return loss_of_output(s, s.generator->forward(s.images, NoiseMode::Deterministic));
}

Outcome criterion_gradients() {
  Outcome o;
  torch::manual_seed(11);
  GradSetup s;
  GeneratorConfig gc{1, 1, 1, 8, 2};
  s.generator = Generator(gc);
  s.discriminator = Discriminator(gc);
  s.generator->to(torch::kDouble);
  s.discriminator->to(torch::kDouble);
  s.generator->eval();
  s.discriminator->eval();
  {
    // move away from the initialization: near the identity map every loss term
    // is close to a stationary point, and zero biases on zero features put
    // ReLUs exactly on their kink, where a central difference is meaningless
    torch::NoGradGuard g;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(14);
    for (auto& p : s.generator->parameters()) p.add_(0.1 * torch::randn(p.sizes(), gen, p.options()));
  }
  for (auto& p : s.discriminator->parameters()) p.set_requires_grad(false);
  for (auto [name, arch] : {std::pair{"A", ToyArch::A}, std::pair{"B", ToyArch::B}}) {
    auto e = std::make_shared<ToyEmbedder>(name, arch, 16, 4);
    e->net()->to(torch::kDouble);
    e->freeze();
    s.embedders.push_back(e);
  }
  s.perceptual = PerceptualNet();
  s.perceptual->to(torch::kDouble);
  freeze(s.perceptual);
  s.images = (torch::rand({2, 3, 32, 32}, at::make_generator<at::CPUGeneratorImpl>(12)) * 1.8 - 0.9).to(torch::kDouble);

  // DLW weights from a short recorded history; they enter as plain numbers
  dlw::DlwConfig dcfg;
  dlw::LossHistoryBank bank(2, dcfg.window);
  for (int t = 0; t < 4; ++t) bank.record(std::vector<double>{1.0 + 0.1 * t, 1.5 - 0.2 * t}, 0, t);
  s.weights = dlw::weighted_identity_loss(bank, std::vector<double>{1.3, 0.9}, dcfg).weights.normalized;

  auto loss = loss_of_generator(s);
  s.generator->zero_grad();
  loss.backward();

  const double h = 1e-5;
  std::mt19937_64 rng(13);
  auto check_block = [&](const std::string& block, torch::nn::Module& m) {
    double worst = 0.0;
    int checked = 0;
    for (auto& p : m.parameters()) {
      if (!p.requires_grad() || !p.grad().defined()) continue;
      auto flat = p.view(-1);
      auto gflat = p.grad().view(-1);
      for (int r = 0; r < 2; ++r) {
        const int64_t idx = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(flat.numel()));
        const double analytic = gflat[idx].item<double>();
        double plus, minus;
        {
          torch::NoGradGuard g;
          const double orig = flat[idx].item<double>();
          flat[idx] = orig + h;
          plus = loss_of_generator(s).item<double>();
          flat[idx] = orig - h;
          minus = loss_of_generator(s).item<double>();
          flat[idx] = orig;
        }
        const double numeric = (plus - minus) / (2 * h);
        // gradients below 1e-7 are dominated by rounding in the difference quotient
        if (std::max(std::abs(analytic), std::abs(numeric)) < 1e-7) continue;
        worst = std::max(worst, rel_err(analytic, numeric));
        ++checked;
      }
    }
    o.check(worst <= 1e-3 && checked > 0,
            block + ": " + std::to_string(checked) + " sampled parameters, max relative error " + fmt(worst, 3));
  };
  check_block("id extraction", *s.generator->id_extraction);
  check_block("perturbation", *s.generator->perturbation);
  check_block("feature", *s.generator->features);
  check_block("cloaking", *s.generator->cloaking);

  // with respect to the generator output
  {
    auto out = s.generator->forward(s.images, NoiseMode::Deterministic).detach().requires_grad_(true);
    auto l = loss_of_output(s, out);
    auto grad = torch::autograd::grad({l}, {out})[0];
    double worst = 0.0;
    auto flat = out.detach().view(-1);
    for (int r = 0; r < 20; ++r) {
      const int64_t idx = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(flat.numel()));
      const double orig = flat[idx].item<double>();
      torch::NoGradGuard g;
      flat[idx] = orig + h;
      const double plus = loss_of_output(s, flat.view_as(out)).item<double>();
      flat[idx] = orig - h;
      const double minus = loss_of_output(s, flat.view_as(out)).item<double>();
      flat[idx] = orig;
      worst = std::max(worst, rel_err(grad.view(-1)[idx].item<double>(), (plus - minus) / (2 * h)));
    }
    o.check(worst <= 1e-3, "generator output: 20 sampled pixels, max relative error " + fmt(worst, 3));
  }

  auto no_grad = [](const std::vector<torch::Tensor>& params) {
    for (const auto& p : params)
      if (p.grad().defined() && p.grad().abs().max().item<double>() != 0.0) return false;
    return true;
  };
  bool frozen_clean = true;
  for (const auto& e : s.embedders) frozen_clean = frozen_clean && no_grad(e->parameters());
  o.check(frozen_clean, "embedder parameters receive zero gradient");
  o.check(no_grad(s.perceptual->parameters()), "perceptual-net parameters receive zero gradient");

  // the weighted identity term differentiates as sum(w_i * dL_i): no gradient through w
  {
    dlw::LossHistoryBank b2(2, dcfg.window);
    auto la = torch::tensor(0.4, torch::dtype(torch::kDouble).requires_grad(true));
    auto lb = torch::tensor(-0.3, torch::dtype(torch::kDouble).requires_grad(true));
    aggregate_identity(SessionMode::parse("dlw"), {"A", "B"}, {la.detach() + 0.2, lb.detach() - 0.1}, b2, dcfg, 0, 0);
    auto agg = aggregate_identity(SessionMode::parse("dlw"), {"A", "B"}, {la, lb}, b2, dcfg, 0, 1);
    agg.value.backward();
    o.check(la.grad().item<double>() == agg.weights[0] && lb.grad().item<double>() == agg.weights[1],
            "d L_id / d L_i equals w_hat_i exactly (weights are constants)");
  }
  return o;
}

// --- metrics ------------------------------------------------------------------------

Outcome criterion_metrics() {
  Outcome o;
  auto a = torch::rand({3, 32, 32}, at::make_generator<at::CPUGeneratorImpl>(1)) * 0.8;
  const double p = psnr(a, a + 0.1);
  o.check(std::abs(p - 20.0) <= 0.01, "PSNR of a uniform 0.1 difference " + fmt(p, 6) + " dB");
  const double s = ssim(a, a);
  o.check(std::abs(s - 1.0) <= 1e-6, "SSIM(x, x) = " + fmt(s, 10));

  std::mt19937_64 rng(17);
  bool monotone = true, saturates = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t ids = 2 + static_cast<int64_t>(rng() % 10);
    const int64_t dim = 4 + static_cast<int64_t>(rng() % 12);
    std::vector<int64_t> gid, pid;
    std::vector<std::string> gkey, pkey;
    for (int64_t i = 0; i < ids; ++i)
      for (int64_t k = 0; k < 1 + static_cast<int64_t>(rng() % 4); ++k) {
        gid.push_back(i);
        gkey.push_back("g" + std::to_string(gid.size()));
      }
    for (int64_t i = 0; i < 15; ++i) {
      pid.push_back(static_cast<int64_t>(rng() % static_cast<std::uint64_t>(ids)));
      pkey.push_back("p" + std::to_string(i));
    }
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1000 + trial);
    auto ge = torch::randn({static_cast<int64_t>(gid.size()), dim}, gen);
    auto pe = torch::randn({15, dim}, gen);
    Gallery g;
    g.enroll(ge / ge.norm(2, 1, true), gid, gkey);
    ProbeSet probes{pe / pe.norm(2, 1, true), pid, pkey};
    double prev = -1.0;
    for (int64_t k = 1; k <= ids + 2; ++k) {
      const double acc = topk_accuracy(g, probes, k);
      if (acc < prev) monotone = false;
      if (k >= ids && acc != 1.0) saturates = false;
      prev = acc;
    }
  }
  o.check(monotone, "top-k accuracy non-decreasing in k on 100 random galleries");
  o.check(saturates, "k >= |identities| gives accuracy 1.0");
  return o;
}

Outcome criterion_swap_identity() {
  Outcome o;
  torch::manual_seed(21);
  auto e = std::make_shared<ToyEmbedder>("A", ToyArch::A, 32, 4);
  e->freeze();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(22);
  auto clean = torch::rand({6, 3, 64, 64}, gen) * 2 - 1;
  auto perturbed = (clean + 0.4 * torch::randn({6, 3, 64, 64}, gen)).clamp(-1, 1);
  auto targets = torch::roll(clean, 1, 0);
  IdentitySwapAdapter identity;
  const double same = swap_nullification(identity, clean, clean, targets, *e).mean_cosine;
  o.check(std::abs(same - 1.0) <= 1e-6, "perturbed = clean gives " + fmt(same, 10));
  const double via_swap = swap_nullification(identity, clean, perturbed, targets, *e).mean_cosine;
  const double direct = cosine_rows(e->embed(clean), e->embed(perturbed)).mean().item<double>();
  o.check(std::abs(via_swap - direct) <= 1e-6,
          "identity swapper " + fmt(via_swap, 8) + " vs direct cosine " + fmt(direct, 8));
  return o;
}

Outcome criterion_round_trip(const fs::path& work) {
  Outcome o;
  auto cfg = TrainConfig::toy();
  cfg.batch_size = 4;
  cfg.seed = 31;
  std::vector<std::shared_ptr<FaceEmbedder>> embs;
  for (auto [name, arch] : {std::pair{"A", ToyArch::A}, std::pair{"B", ToyArch::B}}) {
    torch::manual_seed(name[0]);
    auto e = std::make_shared<ToyEmbedder>(name, arch, 32, 4);
    e->freeze();
    embs.push_back(e);
  }
  torch::manual_seed(32);
  PerceptualNet perc;
  freeze(perc);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(33);
  auto batch = [&] { return torch::rand({4, 3, 64, 64}, gen) * 2 - 1; };
  TrainRun run(cfg, embs, perc);
  for (int i = 0; i < 3; ++i) run.train_step(batch());
  const auto path = work / "round_trip" / "state.pt";
  run.save_checkpoint(path);
  auto back = TrainRun::load_checkpoint(path, embs, perc);
  auto probe = batch();
  o.check(torch::equal(run.cloak(probe), back.cloak(probe)), "forward pass bitwise identical after save -> load");
  auto next = batch();
  auto ma = run.train_step(next), mb = back.train_step(next);
  o.check(ma.weights == mb.weights,
          "next-iteration DLW weights identical (" + fmt(ma.weights[0], 17) + ", " + fmt(ma.weights[1], 17) + ")");
  return o;
}

// --- desk-scale training --------------------------------------------------------------

struct Evaluation {
  double psnr = 0.0, ssim = 0.0;
  std::map<std::string, double> cosine, top1_clean, top1_cloaked;
};

struct DeskSetup {
  fs::path work;
  bool reuse = false;
  DatasetSplits data;
  EmbedderRegistry registry;
  PerceptualNet perceptual{nullptr};
  std::map<std::string, Evaluation> sessions;
  bool ready = false;
};

void prepare_desk(DeskSetup& d) {
  if (d.ready) return;
  const auto data_dir = d.work / "data";
  if (!fs::exists(data_dir / "annotations.txt")) generate_synthetic_dataset(SyntheticFaceSpec{}, 7, data_dir);
  d.data = load_splits(data_dir, 64);
  auto cfg = TrainConfig::toy();
  auto log = [](const std::string& s) { std::cerr << "  " << s << "\n"; };
  d.registry = build_registry(cfg, d.data, d.work / "cache", log);
  d.perceptual = obtain_perceptual_net(d.data, cfg.seed, d.work / "cache", log);
  d.ready = true;
}

double top1(const FaceEmbedder& e, const ImageSet& gallery_set, const ImageSet& probes, const torch::Tensor& images) {
  Gallery g;
  g.enroll(embed_all(e, gallery_set.images), gallery_set.identities, gallery_set.keys);
  return topk_accuracy(g, {embed_all(e, images), probes.identities, probes.keys}, 1);
}

const Evaluation& run_session(DeskSetup& d, const std::string& mode) {
  if (auto it = d.sessions.find(mode); it != d.sessions.end()) return it->second;
  prepare_desk(d);
  auto cfg = TrainConfig::toy();  // 30 epochs, batch 32, default coefficients and DLW constants
  cfg.session_mode = mode;
  if (mode == "single:A") cfg.embedders = {"A"};
  if (mode == "single:B") cfg.embedders = {"B"};
  auto slug = mode;
  std::replace(slug.begin(), slug.end(), ':', '_');
  const auto run_dir = d.work / ("run_" + slug);
  const auto last = run_dir / "last.pt";
  auto embs = d.registry.get(cfg.embedders);
  std::optional<TrainRun> run;
  if (d.reuse && fs::exists(last) && fs::exists(sidecar_path(last)) &&
      read_sidecar(last, "train_run").at("config_hash") == config_hash(cfg)) {
    run.emplace(TrainRun::load_checkpoint(last, embs, d.perceptual));
    std::cerr << "session " << mode << ": continuing from " << last << " at epoch " << run->epoch() << "\n";
  } else {
    fs::remove_all(run_dir);
    run.emplace(cfg, embs, d.perceptual);
    std::cerr << "session " << mode << ": training " << cfg.epochs << " epochs\n";
  }
  FitOptions fo;
  fo.run_dir = run_dir;
  fo.eval_embedders = d.registry.get(cfg.eval_embedders);
  fo.progress = &std::cerr;
  auto report = fit(*run, d.data.train, d.data.val, fo);

  auto best = TrainRun::load_checkpoint(report.best_checkpoint, embs, d.perceptual);
  const auto& test = d.data.test;
  auto cloaked = best.cloak(test.images);
  Evaluation ev;
  const auto q = summarize_quality(test.images, cloaked);
  ev.psnr = q.mean_psnr;
  ev.ssim = q.mean_ssim;
  for (const auto& name : {"A", "B", "C"}) {
    auto e = d.registry.get(name);
    ev.cosine[name] = cosine_rows(embed_all(*e, test.images), embed_all(*e, cloaked)).mean().item<double>();
    ev.top1_clean[name] = top1(*e, d.data.train, test, test.images);
    ev.top1_cloaked[name] = top1(*e, d.data.train, test, cloaked);
  }
  std::cerr << "session " << mode << " (best epoch " << best.epoch() - 1 << "): psnr " << fmt(ev.psnr) << " ssim "
            << fmt(ev.ssim) << " cos A " << fmt(ev.cosine["A"]) << " B " << fmt(ev.cosine["B"]) << " C "
            << fmt(ev.cosine["C"]) << "\n";
  return d.sessions.emplace(mode, ev).first->second;
}

Outcome criterion_end_to_end(DeskSetup& d) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  prepare_desk(d);
  o.check(d.data.dataset.identity_count() == 32 && d.data.dataset.records.size() == 800,
          "dataset: " + std::to_string(d.data.dataset.identity_count()) + " identities, " +
              std::to_string(d.data.dataset.records.size()) + " images at 64x64");
  const auto& ev = run_session(d, "dlw");
  for (const char* n : {"A", "B"}) {
    o.check(ev.top1_clean.at(n) >= 0.9, std::string("embedder ") + n + " clean top-1 " + fmt(ev.top1_clean.at(n)));
  }
  o.note("embedder C clean top-1 " + fmt(ev.top1_clean.at("C")));
  o.check(ev.cosine.at("A") <= 0.5, "mean cosine A " + fmt(ev.cosine.at("A")) + " <= 0.5");
  o.check(ev.cosine.at("B") <= 0.5, "mean cosine B " + fmt(ev.cosine.at("B")) + " <= 0.5");
  o.check(ev.cosine.at("C") <= 0.7, "mean cosine C (held out) " + fmt(ev.cosine.at("C")) + " <= 0.7");
  o.check(ev.psnr >= 30.0, "mean PSNR " + fmt(ev.psnr) + " dB >= 30 (SSIM " + fmt(ev.ssim) + ")");
  for (const char* n : {"A", "B"}) {
    const double drop = ev.top1_clean.at(n) - ev.top1_cloaked.at(n);
    o.check(drop >= 0.30, std::string("top-1 ") + n + " " + fmt(ev.top1_clean.at(n)) + " -> " +
                              fmt(ev.top1_cloaked.at(n)) + " (drop " + fmt(100 * drop, 3) + " points)");
  }
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  o.check(minutes <= 240.0, "runtime " + fmt(minutes, 3) + " min (CPU budget 240)");
  return o;
}

Outcome criterion_ablation(DeskSetup& d) {
  Outcome o;
  const std::vector<std::string> modes{"single:A", "single:B", "average", "dlw"};
  MetricTable grid{"ablation", {"session"}, {"cosine_A", "cosine_B", "cosine_C", "psnr", "ssim"}, {}};
  std::map<std::string, double> mean_cos;
  for (const auto& m : modes) {
    const auto& ev = run_session(d, m);
    grid.add({m}, {ev.cosine.at("A"), ev.cosine.at("B"), ev.cosine.at("C"), ev.psnr, ev.ssim});
    mean_cos[m] = (ev.cosine.at("A") + ev.cosine.at("B") + ev.cosine.at("C")) / 3.0;
  }
  EvalReport report{"toy", "ablation", "test", {grid}, {{"seed", TrainConfig::toy().seed}}};
  const auto written = emit_report(report, d.work / "reports");

  // schema completeness, read back from disk
  std::ifstream f(written.at(0));
  std::string line;
  std::getline(f, line);
  bool schema = line == "session,cosine_A,cosine_B,cosine_C,psnr,ssim";
  std::set<std::string> seen;
  int rows = 0;
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    schema = schema && cells.size() == 6;
    if (!cells.empty()) seen.insert(cells[0]);
    for (std::size_t i = 1; i < cells.size(); ++i) schema = schema && std::isfinite(std::stod(cells[i]));
    ++rows;
  }
  schema = schema && rows == 4 && seen == std::set<std::string>(modes.begin(), modes.end());
  o.check(schema, "report " + written.at(0).filename().string() + ": 4 sessions x (cosine A, B, C, PSNR, SSIM)");
  for (const auto& m : modes) {
    const auto& ev = d.sessions.at(m);
    o.note(m + ": cos A " + fmt(ev.cosine.at("A")) + " B " + fmt(ev.cosine.at("B")) + " C " + fmt(ev.cosine.at("C")) +
           ", mean " + fmt(mean_cos[m]) + ", PSNR " + fmt(ev.psnr) + ", SSIM " + fmt(ev.ssim));
  }
  for (const char* single : {"single:A", "single:B"}) {
    o.check(mean_cos["dlw"] <= mean_cos[single] + 0.05,
            "dlw mean cosine " + fmt(mean_cos["dlw"]) + " <= " + single + " " + fmt(mean_cos[single]) + " + 0.05");
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = NULLSWAP_ACCEPTANCE_WORK;
  bool reuse = false;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--reuse") {
      reuse = true;
    } else {
      try {
        only.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::cerr << "usage: acceptance [--work DIR] [--reuse] [criterion numbers...]\n";
        return 2;
      }
    }
  }
  if (!reuse) fs::remove_all(work);
  fs::create_directories(work);
  torch::set_num_threads(std::max(1u, std::thread::hardware_concurrency()));

  DeskSetup desk;
  desk.work = work;
  desk.reuse = reuse;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"DLW oracle equivalence", criterion_dlw_oracle},
      {"DLW invariants", criterion_dlw_invariants},
      {"hand-computed DLW case", criterion_dlw_hand_case},
      {"generator contracts", criterion_generator},
      {"gradient checks", criterion_gradients},
      {"metric oracles", criterion_metrics},
      {"desk-scale end-to-end", [&] { return criterion_end_to_end(desk); }},
      {"ablation harness", [&] { return criterion_ablation(desk); }},
      {"swap_nullification identity cases", criterion_swap_identity},
      {"checkpoint round-trip", [&] { return criterion_round_trip(work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(number)) continue;
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome.check(false, std::string("exception: ") + e.what());
    }
    if (!outcome.pass) ++failed;
    std::cout << (outcome.pass ? "PASS" : "FAIL") << " " << number << " " << criteria[i].first << "\n";
    for (const auto& n : outcome.notes) std::cout << "    " << n << "\n";
    std::cout.flush();
  }
  return failed == 0 ? 0 : 1;
}
