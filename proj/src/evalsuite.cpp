#include "nullswap/evalsuite.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>
#include <thread>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include "nullswap/image_io.hpp"

namespace nullswap {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw std::invalid_argument("psnr: shape mismatch");
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return g.unsqueeze(1).matmul(g.unsqueeze(0));
}

}  // namespace

double ssim(const torch::Tensor& a_in, const torch::Tensor& b_in) {
  if (a_in.sizes() != b_in.sizes()) throw std::invalid_argument("ssim: shape mismatch");
  auto a = a_in.to(torch::kFloat64);
  auto b = b_in.to(torch::kFloat64);
  if (a.dim() == 3) {
    a = a.unsqueeze(0);
    b = b.unsqueeze(0);
  }
  if (a.size(2) < 11 || a.size(3) < 11) throw std::invalid_argument("ssim: images smaller than the 11x11 window");
  const int64_t c = a.size(1);
  auto w = gaussian_window(11, 1.5).view({1, 1, 11, 11}).repeat({c, 1, 1, 1});
  auto filt = [&](const torch::Tensor& x) { return F::conv2d(x, w, F::Conv2dFuncOptions().groups(c)); };
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  auto mu_a = filt(a), mu_b = filt(b);
  auto var_a = filt(a * a) - mu_a * mu_a;
  auto var_b = filt(b * b) - mu_b * mu_b;
  auto cov = filt(a * b) - mu_a * mu_b;
  auto num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
  auto den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
  return (num / den).mean().item<double>();
}

QualityScores image_quality(const torch::Tensor& clean, const torch::Tensor& cloaked, PerceptualNet* perceptual) {
  if (clean.sizes() != cloaked.sizes()) throw std::invalid_argument("image_quality: shape mismatch");
  torch::NoGradGuard guard;
  QualityScores s;
  s.psnr = psnr(clean, cloaked);
  s.ssim = ssim(clean, cloaked);
  if (perceptual && !perceptual->is_empty()) {
    auto x = clean.dim() == 3 ? clean.unsqueeze(0) : clean;
    auto y = cloaked.dim() == 3 ? cloaked.unsqueeze(0) : cloaked;
    s.perceptual = perceptual_loss(x.to(torch::kFloat32) * 2.0 - 1.0, y.to(torch::kFloat32) * 2.0 - 1.0, *perceptual)
                       .item<double>();
  } else {
    s.perceptual = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

QualitySummary summarize_quality(const torch::Tensor& clean, const torch::Tensor& cloaked, PerceptualNet* perceptual) {
  if (clean.sizes() != cloaked.sizes()) throw std::invalid_argument("summarize_quality: shape mismatch");
  QualitySummary out;
  out.images = clean.size(0);
  int64_t finite = 0;
  for (int64_t i = 0; i < clean.size(0); ++i) {
    const auto q = image_quality(to_unit_range(clean[i]), to_unit_range(cloaked[i]), perceptual);
    if (std::isinf(q.psnr)) {
      ++out.infinite_psnr;
    } else {
      out.mean_psnr += q.psnr;
      ++finite;
    }
    out.mean_ssim += q.ssim;
    out.mean_perceptual += q.perceptual;
  }
  if (out.images > 0) {
    out.mean_ssim /= static_cast<double>(out.images);
    out.mean_perceptual /= static_cast<double>(out.images);
  }
  out.mean_psnr = finite > 0 ? out.mean_psnr / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
  return out;
}

// --- gallery ------------------------------------------------------------------

void Gallery::enroll(const torch::Tensor& embeddings, const std::vector<int64_t>& identities,
                     const std::vector<std::string>& keys) {
  if (embeddings.dim() != 2 || embeddings.size(0) != static_cast<int64_t>(identities.size()) ||
      identities.size() != keys.size()) {
    throw std::invalid_argument("gallery: embeddings, identities and keys must have matching lengths");
  }
  auto e = embeddings.detach().to(torch::kFloat64);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (members_.count(keys[i])) throw std::invalid_argument("gallery: key enrolled twice: " + keys[i]);
    auto row = e[static_cast<int64_t>(i)].clone();
    auto it = sums_.find(identities[i]);
    if (it == sums_.end()) {
      sums_.emplace(identities[i], row.clone());
      counts_[identities[i]] = 1;
    } else {
      it->second += row;
      ++counts_[identities[i]];
    }
    members_.emplace(keys[i], std::make_pair(identities[i], row));
  }
}

std::vector<int64_t> Gallery::identities() const {
  std::vector<int64_t> out;
  for (const auto& [id, s] : sums_) out.push_back(id);
  return out;
}

std::optional<torch::Tensor> Gallery::prototype(int64_t identity, const std::string& exclude_key) const {
  auto it = sums_.find(identity);
  if (it == sums_.end()) return std::nullopt;
  auto sum = it->second;
  int64_t count = counts_.at(identity);
  if (!exclude_key.empty()) {
    auto m = members_.find(exclude_key);
    if (m != members_.end() && m->second.first == identity) {
      sum = sum - m->second.second;
      --count;
    }
  }
  if (count == 0) return std::nullopt;
  const double norm = sum.norm().item<double>();
  // embeddings that cancel out leave a zero prototype, which scores 0 against anything
  if (norm == 0.0) return sum;
  return sum / norm;
}

double topk_accuracy(const Gallery& gallery, const ProbeSet& probes, int64_t k) {
  if (k < 1) throw std::invalid_argument("topk_accuracy: k must be >= 1");
  const auto n = static_cast<int64_t>(probes.identities.size());
  if (probes.embeddings.size(0) != n) throw std::invalid_argument("topk_accuracy: embeddings/identities mismatch");
  if (n == 0) return 0.0;
  const auto ids = gallery.identities();
  std::vector<torch::Tensor> protos;
  for (int64_t id : ids) protos.push_back(*gallery.prototype(id));
  auto base = torch::stack(protos);  // [I, D]
  auto emb = probes.embeddings.detach().to(torch::kFloat64);
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t truth = probes.identities[static_cast<std::size_t>(i)];
    if (!gallery.contains(truth)) {
      throw std::invalid_argument("topk_accuracy: probe identity " + std::to_string(truth) + " is not enrolled");
    }
    auto e = emb[i];
    e = e / e.norm();
    const std::string key = probes.keys.empty() ? std::string() : probes.keys[static_cast<std::size_t>(i)];
    auto own = gallery.prototype(truth, key);
    auto scores = base.matmul(e);
    const auto pos = std::lower_bound(ids.begin(), ids.end(), truth) - ids.begin();
    if (!own) {
      // the probe was the identity's only enrolled image; the identity cannot be matched
      continue;
    }
    const double truth_score = own->dot(e).item<double>();
    scores[pos] = truth_score;
    const int64_t higher = (scores > truth_score).sum().item<int64_t>();
    if (higher < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

torch::Tensor embed_all(const FaceEmbedder& embedder, const torch::Tensor& images, int64_t batch) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < images.size(0); s += batch) {
    parts.push_back(embedder.embed(images.slice(0, s, std::min(images.size(0), s + batch))));
  }
  if (parts.empty()) return torch::empty({0, embedder.dim()});
  return torch::cat(parts);
}

// --- swapping ----------------------------------------------------------------

ExecutableSwapAdapter::ExecutableSwapAdapter(std::string name, std::vector<std::string> command,
                                             std::chrono::milliseconds timeout, fs::path work_dir)
    : name_(std::move(name)), command_(std::move(command)), timeout_(timeout), work_dir_(std::move(work_dir)) {
  if (command_.empty()) throw std::invalid_argument("swap adapter '" + name_ + "': empty command");
}

torch::Tensor ExecutableSwapAdapter::swap(const torch::Tensor& source, const torch::Tensor& target) {
  fs::create_directories(work_dir_);
  const auto tag = name_ + "_" + std::to_string(calls_++);
  const auto src = work_dir_ / (tag + "_source.png");
  const auto tgt = work_dir_ / (tag + "_target.png");
  const auto out = work_dir_ / (tag + "_output.png");
  save_image(source, src);
  save_image(target, tgt);
  fs::remove(out);

  std::vector<std::string> args = command_;
  args.push_back(src.string());
  args.push_back(tgt.string());
  args.push_back(out.string());
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);

  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("swap adapter '" + name_ + "': fork failed");
  if (pid == 0) {
    execvp(argv[0], argv.data());
    _exit(127);
  }
  const auto deadline = std::chrono::steady_clock::now() + timeout_;
  int status = 0;
  while (true) {
    const pid_t r = waitpid(pid, &status, WNOHANG);
    if (r == pid) break;
    if (r < 0) throw std::runtime_error("swap adapter '" + name_ + "': waitpid failed");
    if (std::chrono::steady_clock::now() > deadline) {
      kill(pid, SIGKILL);
      waitpid(pid, &status, 0);
      throw std::runtime_error("swap adapter '" + name_ + "': timed out");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw std::runtime_error("swap adapter '" + name_ + "': exited with status " +
                             std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));
  }
  if (!fs::exists(out)) throw std::runtime_error("swap adapter '" + name_ + "': no output image written");
  return load_image(out, source.size(-1));
}

NullificationResult swap_nullification(FaceSwapAdapter& swapper, const torch::Tensor& clean,
                                       const torch::Tensor& perturbed, const torch::Tensor& targets,
                                       const FaceEmbedder& embedder) {
  if (clean.sizes() != perturbed.sizes() || clean.size(0) != targets.size(0)) {
    throw std::invalid_argument("swap_nullification: clean, perturbed and targets must pair up");
  }
  torch::NoGradGuard guard;
  NullificationResult r;
  r.pairs = clean.size(0);
  double sum = 0.0;
  for (int64_t i = 0; i < r.pairs; ++i) {
    try {
      auto a = swapper.swap(clean[i], targets[i]);
      auto b = swapper.swap(perturbed[i], targets[i]);
      auto ea = embedder.embed(a.unsqueeze(0).to(torch::kFloat32));
      auto eb = embedder.embed(b.unsqueeze(0).to(torch::kFloat32));
      sum += cosine_rows(ea, eb).item<double>();
      ++r.succeeded;
    } catch (const std::exception& e) {
      r.failures.push_back("pair " + std::to_string(i) + ": " + e.what());
    }
  }
  r.mean_cosine = r.succeeded > 0 ? sum / static_cast<double>(r.succeeded) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// --- reports ------------------------------------------------------------------

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void MetricTable::add(std::vector<std::string> keys, std::vector<double> values) {
  if (keys.size() != key_columns.size() || values.size() != value_columns.size()) {
    throw std::invalid_argument("metric table '" + metric + "': row does not match the columns");
  }
  rows.push_back({std::move(keys), std::move(values)});
}

std::string MetricTable::to_csv() const {
  std::string out;
  auto append_row = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  std::vector<std::string> header = key_columns;
  header.insert(header.end(), value_columns.begin(), value_columns.end());
  append_row(header);
  for (const auto& r : rows) {
    std::vector<std::string> cells = r.keys;
    for (double v : r.values) cells.push_back(format_number(v));
    append_row(cells);
  }
  return out;
}

nlohmann::json MetricTable::to_json() const {
  auto j = nlohmann::json{{"metric", metric}, {"key_columns", key_columns}, {"value_columns", value_columns}};
  auto rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    auto values = nlohmann::json::array();
    for (double v : r.values) {
      if (std::isfinite(v)) {
        values.push_back(v);
      } else {
        values.push_back(format_number(v));
      }
    }
    rows_json.push_back({{"keys", r.keys}, {"values", values}});
  }
  j["rows"] = rows_json;
  return j;
}

std::vector<fs::path> emit_report(const EvalReport& report, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const std::string prefix = report.dataset + "_" + report.checkpoint_hash + "_";
  std::vector<fs::path> written;
  auto tables = nlohmann::json::array();
  for (const auto& t : report.tables) {
    const auto path = out_dir / (prefix + t.metric + ".csv");
    std::ofstream(path, std::ios::binary) << t.to_csv();
    written.push_back(path);
    tables.push_back(t.to_json());
  }
  nlohmann::json j{{"dataset", report.dataset},
                   {"checkpoint_hash", report.checkpoint_hash},
                   {"split", report.split},
                   {"provenance", report.provenance},
                   {"tables", tables}};
  const auto path = out_dir / (prefix + "report.json");
  std::ofstream(path, std::ios::binary) << j.dump(2) << '\n';
  written.push_back(path);
  return written;
}

}  // namespace nullswap
