#include "nullswap/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "nullswap/checkpoint.hpp"
#include "nullswap/evalsuite.hpp"
#include "nullswap/image_io.hpp"
#include "nullswap/pipeline.hpp"

namespace nullswap {

namespace fs = std::filesystem;

namespace {

// Problems with the command line that CLI11 cannot see on its own.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void write_manifest(const fs::path& dir, nlohmann::json body) {
  body["written"] = timestamp();
  write_text(dir / "manifest.json", body.dump(2) + "\n");
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// --- shared pieces of the eval commands -----------------------------------------

struct EvalOptions {
  fs::path checkpoint;
  fs::path dataset;  // empty = the dataset recorded in the checkpoint
  std::string split = "test";
  fs::path out = "reports";
  std::vector<std::string> embedders;  // empty = the checkpoint's eval embedders
};

struct EvalInputs {
  TrainConfig config;
  DatasetSplits data;
  ImageSet probes;
  torch::Tensor cloaked;
  std::string checkpoint_hash;
  fs::path cache;
};

torch::Tensor cloak_batches(Generator& g, const torch::Tensor& images, NoiseMode mode,
                            std::optional<at::Generator> rng) {
  torch::NoGradGuard guard;
  g->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < images.size(0); s += 32) {
    parts.push_back(g->forward(images.slice(0, s, std::min(images.size(0), s + 32)), mode, rng));
  }
  return torch::cat(parts, 0);
}

EvalInputs prepare_eval(const EvalOptions& o, std::ostream& err) {
  EvalInputs in;
  in.config = read_sidecar(o.checkpoint, "train_run").at("config").get<TrainConfig>();
  const fs::path root = o.dataset.empty() ? fs::path(in.config.dataset) : o.dataset;
  if (root.empty()) throw UsageError("the checkpoint records no dataset; pass --dataset");
  in.data = load_splits(root, in.config.image_size);
  const Split split = parse_split(o.split);
  in.probes = split == Split::Train ? in.data.train : split == Split::Val ? in.data.val : in.data.test;
  if (in.probes.size() == 0) throw std::runtime_error("split '" + o.split + "' of " + root.string() + " is empty");
  auto g = load_generator(o.checkpoint);
  in.cloaked = cloak_batches(g, in.probes.images, NoiseMode::Deterministic, std::nullopt);
  in.checkpoint_hash = checkpoint_hash(o.checkpoint);
  in.cache = cache_dir();
  err << "cloaked " << in.probes.size() << " " << o.split << " images of " << in.data.dataset.name() << "\n";
  return in;
}

PerceptualNet perceptual_for(const TrainConfig& cfg, const DatasetSplits& data, const fs::path& cache,
                             const Logger& log) {
  if (!cfg.perceptual_weights.empty()) return load_perceptual_net(cfg.perceptual_weights);
  return obtain_perceptual_net(data, cfg.seed, cache, log);
}

EvalReport new_report(const EvalOptions& o, const EvalInputs& in, const std::string& command) {
  EvalReport r;
  r.dataset = in.data.dataset.name();
  r.checkpoint_hash = in.checkpoint_hash;
  r.split = o.split;
  r.provenance = {{"command", command},
                  {"checkpoint", fs::absolute(o.checkpoint).string()},
                  {"config_hash", config_hash(in.config)},
                  {"dataset_fingerprint", in.data.fingerprint},
                  {"images", in.probes.size()}};
  return r;
}

void finish_report(const EvalReport& r, const fs::path& out, std::ostream& os) {
  for (const auto& p : emit_report(r, out)) os << p.string() << "\n";
}

std::vector<std::shared_ptr<FaceEmbedder>> eval_embedders(const EvalOptions& o, const EvalInputs& in,
                                                          const Logger& log) {
  auto cfg = in.config;
  cfg.eval_embedders = o.embedders.empty() ? (cfg.eval_embedders.empty() ? cfg.embedders : cfg.eval_embedders)
                                           : o.embedders;
  auto registry = build_registry(cfg, in.data, in.cache, log);
  return registry.get(cfg.eval_embedders);
}

// --- commands ------------------------------------------------------------------

struct GenDataOptions {
  fs::path out;
  SyntheticFaceSpec spec;
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenDataOptions& o, std::ostream& out) {
  o.spec.validate();
  auto ds = generate_synthetic_dataset(o.spec, o.seed, o.out);
  out << "wrote " << ds.records.size() << " images of " << ds.identity_count() << " identities to " << o.out.string()
      << "\n";
  return 0;
}

struct TrainOptions {
  fs::path config;
  std::string profile = "default";
  std::vector<std::string> overrides;
  fs::path dataset;
  fs::path run_dir;
  bool resume = false;
};

int cmd_train(const TrainOptions& o, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  TrainConfig cfg = o.profile == "toy" ? TrainConfig::toy() : TrainConfig{};
  if (!o.config.empty()) cfg.apply(read_config_file(o.config));
  for (const auto& kv : o.overrides) {
    auto [key, value] = parse_override(kv);
    cfg.set(key, value);
  }
  if (!o.dataset.empty()) cfg.dataset = o.dataset.string();
  if (!o.run_dir.empty()) cfg.run_dir = o.run_dir.string();
  if (cfg.dataset.empty()) throw UsageError("no dataset: set `dataset` in the config or pass --dataset");
  cfg.validate();

  const fs::path run_dir = cfg.run_dir;
  const auto last = run_dir / "last.pt";
  if (!o.resume && fs::exists(last)) {
    throw std::runtime_error(run_dir.string() + " already holds a run; pass --resume or choose another --run-dir");
  }
  fs::create_directories(run_dir);
  Logger log = [&err](const std::string& s) { err << s << "\n"; };

  auto data = load_splits(cfg.dataset, cfg.image_size);
  const auto cache = cache_dir();
  auto registry = build_registry(cfg, data, cache, log);
  auto perceptual = perceptual_for(cfg, data, cache, log);

  std::optional<TrainRun> run;
  if (o.resume && fs::exists(last)) {
    run.emplace(TrainRun::load_checkpoint(last, registry.get(cfg.embedders), perceptual));
    if (config_hash(run->config()) != config_hash(cfg)) {
      err << "note: resuming with the configuration stored in " << last.string() << "\n";
    }
    err << "resuming at epoch " << run->epoch() << "\n";
  } else {
    run.emplace(cfg, registry.get(cfg.embedders), perceptual);
  }
  const auto& used = run->config();
  write_text(run_dir / "config.toml", used.to_toml());

  nlohmann::json manifest = {{"command", "train"},
                             {"argv", argv},
                             {"config_hash", config_hash(used)},
                             {"dataset", fs::absolute(used.dataset).string()},
                             {"dataset_fingerprint", data.fingerprint},
                             {"cache", fs::absolute(cache).string()},
                             {"started", timestamp()},
                             {"status", "running"}};
  write_manifest(run_dir, manifest);

  FitOptions fo;
  fo.run_dir = run_dir;
  fo.eval_embedders = registry.get(used.eval_embedders.empty() ? used.embedders : used.eval_embedders);
  fo.progress = &err;
  FitReport report;
  try {
    report = fit(*run, data.train, data.val, fo);
  } catch (const NonFiniteLoss& e) {
    manifest["status"] = "failed";
    manifest["error"] = e.what();
    manifest["last_good_checkpoint"] = e.last_good_checkpoint().string();
    write_manifest(run_dir, manifest);
    throw;
  }
  manifest["status"] = "complete";
  manifest["epochs"] = run->epoch();
  manifest["best_checkpoint"] = report.best_checkpoint.string();
  manifest["last_checkpoint"] = report.last_checkpoint.string();
  manifest["best_epoch"] = report.best_epoch;
  write_manifest(run_dir, manifest);
  out << report.best_checkpoint.string() << "\n";
  return 0;
}

struct CloakOptions {
  fs::path checkpoint;
  fs::path in;
  fs::path out;
  int64_t size = 0;
  bool stochastic = false;
  std::uint64_t seed = 0;
};

int cmd_cloak(const CloakOptions& o, std::ostream& out, std::ostream& err) {
  const auto cfg = read_sidecar(o.checkpoint, "train_run").at("config").get<TrainConfig>();
  const int64_t size = o.size > 0 ? o.size : cfg.image_size;
  auto g = load_generator(o.checkpoint);
  const auto files = list_images(o.in);
  if (files.empty()) throw std::runtime_error("no images in " + o.in.string());
  fs::create_directories(o.out);
  std::optional<at::Generator> rng;
  if (o.stochastic) rng = at::make_generator<at::CPUGeneratorImpl>(o.seed);
  const auto mode = o.stochastic ? NoiseMode::Stochastic : NoiseMode::Deterministic;
  for (const auto& f : files) {
    auto img = load_image(f, size).unsqueeze(0);
    auto cloaked = cloak_batches(g, img, mode, rng);
    auto name = f.filename();
    if (name.extension() != ".png") name.replace_extension(".png");
    save_image(cloaked[0], o.out / name);
  }
  err << "cloaked " << files.size() << " images into " << o.out.string() << "\n";
  out << o.out.string() << "\n";
  return 0;
}

int cmd_eval_visual(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  Logger log = [&err](const std::string& s) { err << s << "\n"; };
  auto in = prepare_eval(o, err);
  auto perceptual = perceptual_for(in.config, in.data, in.cache, log);
  MetricTable per_image{"quality", {"image"}, {"psnr", "ssim", "perceptual"}, {}};
  const auto clean01 = to_unit_range(in.probes.images);
  const auto cloaked01 = to_unit_range(in.cloaked);
  for (int64_t i = 0; i < in.probes.size(); ++i) {
    const auto q = image_quality(clean01[i], cloaked01[i], &perceptual);
    per_image.add({in.probes.keys[static_cast<std::size_t>(i)]}, {q.psnr, q.ssim, q.perceptual});
  }
  const auto s = summarize_quality(in.probes.images, in.cloaked, &perceptual);
  MetricTable summary{"quality_summary", {"split"}, {"psnr", "ssim", "perceptual", "images", "infinite_psnr"}, {}};
  summary.add({o.split}, {s.mean_psnr, s.mean_ssim, s.mean_perceptual, static_cast<double>(s.images),
                          static_cast<double>(s.infinite_psnr)});
  auto report = new_report(o, in, "eval-visual");
  report.tables = {summary, per_image};
  finish_report(report, o.out, out);
  err << "psnr " << format_number(s.mean_psnr) << " ssim " << format_number(s.mean_ssim) << " perceptual "
      << format_number(s.mean_perceptual) << "\n";
  return 0;
}

int cmd_eval_id(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  Logger log = [&err](const std::string& s) { err << s << "\n"; };
  auto in = prepare_eval(o, err);
  MetricTable topk{"topk", {"embedder", "images"}, {"top1", "top5"}, {}};
  MetricTable cosine{"cosine", {"embedder"}, {"mean_cosine"}, {}};
  for (const auto& e : eval_embedders(o, in, log)) {
    Gallery gallery;
    gallery.enroll(embed_all(*e, in.data.train.images), in.data.train.identities, in.data.train.keys);
    const auto clean = embed_all(*e, in.probes.images);
    const auto cloaked = embed_all(*e, in.cloaked);
    const ProbeSet clean_probes{clean, in.probes.identities, in.probes.keys};
    const ProbeSet cloaked_probes{cloaked, in.probes.identities, in.probes.keys};
    topk.add({e->name(), "clean"}, {topk_accuracy(gallery, clean_probes, 1), topk_accuracy(gallery, clean_probes, 5)});
    topk.add({e->name(), "cloaked"},
             {topk_accuracy(gallery, cloaked_probes, 1), topk_accuracy(gallery, cloaked_probes, 5)});
    const double c = cosine_rows(clean, cloaked).mean().item<double>();
    cosine.add({e->name()}, {c});
    err << e->name() << ": mean cosine " << format_number(c) << "\n";
  }
  auto report = new_report(o, in, "eval-id");
  report.provenance["gallery"] = "train split, clean images";
  report.tables = {topk, cosine};
  finish_report(report, o.out, out);
  return 0;
}

struct SwapOptions {
  EvalOptions eval;
  std::string swapper = "identity";
  double timeout_s = 60.0;
};

int cmd_eval_swap(const SwapOptions& o, std::ostream& out, std::ostream& err) {
  Logger log = [&err](const std::string& s) { err << s << "\n"; };
  auto in = prepare_eval(o.eval, err);
  std::unique_ptr<FaceSwapAdapter> swapper;
  if (o.swapper == "identity") {
    swapper = std::make_unique<IdentitySwapAdapter>();
  } else {
    auto cmd = split_words(o.swapper);
    if (cmd.empty()) throw UsageError("--swapper is empty");
    const auto timeout = std::chrono::milliseconds(static_cast<int64_t>(o.timeout_s * 1000.0));
    swapper = std::make_unique<ExecutableSwapAdapter>(fs::path(cmd[0]).filename().string(), cmd, timeout,
                                                      o.eval.out / "swap_work");
  }
  // each source is paired with the next probe as target
  const auto targets = torch::roll(in.probes.images, 1, 0);
  MetricTable table{"swap", {"embedder", "swapper"}, {"mean_cosine", "pairs", "succeeded"}, {}};
  bool any = false;
  for (const auto& e : eval_embedders(o.eval, in, log)) {
    const auto r = swap_nullification(*swapper, in.probes.images, in.cloaked, targets, *e);
    table.add({e->name(), swapper->name()},
              {r.mean_cosine, static_cast<double>(r.pairs), static_cast<double>(r.succeeded)});
    for (const auto& f : r.failures) err << e->name() << ": " << f << "\n";
    any = any || r.succeeded > 0;
  }
  auto report = new_report(o.eval, in, "eval-swap");
  report.provenance["swapper"] = o.swapper;
  report.tables = {table};
  finish_report(report, o.eval.out, out);
  if (!any) {
    err << "no swap succeeded\n";
    return 1;
  }
  return 0;
}

// --- report: SVG line plots from the training CSVs --------------------------------

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

Csv read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  Csv csv;
  std::string line;
  auto cells = [](const std::string& l) {
    std::vector<std::string> out;
    std::stringstream s(l);
    for (std::string c; std::getline(s, c, ',');) out.push_back(c);
    return out;
  };
  if (!std::getline(f, line)) return csv;
  csv.header = cells(line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    for (const auto& c : cells(line)) {
      try {
        row.push_back(std::stod(c));
      } catch (const std::exception&) {
        row.push_back(std::nan(""));
      }
    }
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string svg_plot(const std::string& title, const std::string& xlabel, const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 60, R = 130, T = 36, B = 46;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n"
    << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = y0 + (y1 - y0) * i / 4.0, x = x0 + (x1 - x0) * i / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << format_number(std::round(y * 1000) / 1000)
      << "</text>\n";
    s << "<text x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">"
      << format_number(std::round(x * 100) / 100) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* c = colors[k % std::size(colors)];
    s << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : series[k].points) {
      if (std::isfinite(x) && std::isfinite(y)) s << px(x) << ',' << py(y) << ' ';
    }
    s << "\"/>\n<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 + 18 * k << "\" fill=\"" << c << "\">"
      << series[k].name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

Series column_series(const Csv& csv, const std::string& x, const std::string& y, const std::string& label) {
  Series s{label, {}};
  const int xi = csv.column(x), yi = csv.column(y);
  if (xi < 0 || yi < 0) return s;
  for (const auto& r : csv.rows) {
    if (static_cast<int>(r.size()) > std::max(xi, yi)) s.points.emplace_back(r[xi], r[yi]);
  }
  return s;
}

int cmd_report(const fs::path& run_dir, fs::path out_dir, std::ostream& out) {
  if (out_dir.empty()) out_dir = run_dir / "plots";
  const auto epochs_csv = run_dir / "epochs.csv";
  if (!fs::exists(epochs_csv)) throw std::runtime_error("no epochs.csv in " + run_dir.string());
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& svg) {
    write_text(out_dir / name, svg);
    written.push_back(out_dir / name);
  };

  const auto ep = read_csv(epochs_csv);
  emit("psnr.svg", svg_plot("validation PSNR (dB)", "epoch", {column_series(ep, "epoch", "val_psnr", "psnr")}));
  std::vector<Series> cos;
  for (const auto& h : ep.header) {
    if (h.rfind("val_cosine_", 0) == 0) cos.push_back(column_series(ep, "epoch", h, h.substr(11)));
  }
  emit("cosine.svg", svg_plot("validation identity cosine", "epoch", cos));
  emit("train_loss.svg", svg_plot("training losses (epoch mean)", "epoch",
                                  {column_series(ep, "epoch", "train_total", "total"),
                                   column_series(ep, "epoch", "train_identity", "identity"),
                                   column_series(ep, "epoch", "train_mse", "mse")}));

  if (const auto wpath = run_dir / "weights.csv"; fs::exists(wpath)) {
    const auto w = read_csv(wpath);
    const int it = w.column("iteration"), obj = w.column("objective_id"), nw = w.column("normalized_weight");
    std::map<int, Series> by_obj;
    for (const auto& r : w.rows) {
      if (static_cast<int>(r.size()) <= std::max({it, obj, nw})) continue;
      const int id = static_cast<int>(r[obj]);
      auto& s = by_obj[id];
      s.name = "objective " + std::to_string(id);
      s.points.emplace_back(r[it], r[nw]);
    }
    std::vector<Series> ws;
    for (auto& [id, s] : by_obj) ws.push_back(std::move(s));
    emit("weights.svg", svg_plot("normalized identity-loss weights", "iteration", ws));
  }
  for (const auto& p : written) out << p.string() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Identity cloaking against face swapping: train, cloak and evaluate."};
  app.name("nullswap");
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic identity-labelled face dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--identities", gen.spec.identities, "number of identities")->capture_default_str();
  gen_cmd->add_option("--images-per-identity", gen.spec.images_per_identity)->capture_default_str();
  gen_cmd->add_option("--size", gen.spec.image_size, "image side in pixels")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "train the cloaking generator");
  train_cmd->add_option("--config", tr.config, "TOML config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--profile", tr.profile, "base settings before the config file")
      ->check(CLI::IsMember({"default", "toy"}))
      ->capture_default_str();
  train_cmd->add_option("--override", tr.overrides, "key=value, any config field (repeatable)");
  train_cmd->add_option("--dataset", tr.dataset, "dataset directory (overrides the config)");
  train_cmd->add_option("--run-dir", tr.run_dir, "output directory (overrides the config)");
  train_cmd->add_flag("--resume", tr.resume, "continue from <run-dir>/last.pt");

  CloakOptions ck;
  auto* cloak_cmd = app.add_subcommand("cloak", "cloak every image in a directory");
  cloak_cmd->add_option("--checkpoint", ck.checkpoint)->required()->check(CLI::ExistingFile);
  cloak_cmd->add_option("--in", ck.in, "input directory")->required()->check(CLI::ExistingDirectory);
  cloak_cmd->add_option("--out", ck.out, "output directory")->required();
  cloak_cmd->add_option("--size", ck.size, "resize inputs to this side (default: training size)");
  cloak_cmd->add_flag("--stochastic", ck.stochastic, "sample the generator noise");
  cloak_cmd->add_option("--seed", ck.seed, "noise seed for --stochastic")->capture_default_str();

  auto add_eval = [&app](const std::string& name, const std::string& help, EvalOptions& o) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    c->add_option("--dataset", o.dataset, "dataset directory (default: the training dataset)");
    c->add_option("--split", o.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    c->add_option("--out", o.out, "report directory")->capture_default_str();
    return c;
  };
  EvalOptions ev_visual, ev_id;
  SwapOptions sw;
  auto* visual_cmd = add_eval("eval-visual", "PSNR, SSIM and perceptual distance of cloaked images", ev_visual);
  auto* id_cmd = add_eval("eval-id", "recognition accuracy and cosine on cloaked images", ev_id);
  id_cmd->add_option("--embedders", ev_id.embedders, "embedder names (default: from the checkpoint)")->delimiter(',');
  auto* swap_cmd = add_eval("eval-swap", "identity similarity of swaps from clean vs cloaked sources", sw.eval);
  swap_cmd->add_option("--embedders", sw.eval.embedders, "embedder names (default: from the checkpoint)")
      ->delimiter(',');
  swap_cmd->add_option("--swapper", sw.swapper, "`identity` or a command run as CMD SRC TGT OUT")
      ->capture_default_str();
  swap_cmd->add_option("--timeout", sw.timeout_s, "seconds per swap call")->check(CLI::PositiveNumber)
      ->capture_default_str();

  fs::path report_run, report_out;
  auto* report_cmd = app.add_subcommand("report", "render SVG plots from a run directory's CSV logs");
  report_cmd->add_option("--run-dir", report_run)->required()->check(CLI::ExistingDirectory);
  report_cmd->add_option("--out", report_out, "plot directory (default: <run-dir>/plots)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    const auto parsed = app.get_subcommands();
    err << "error: " << e.what() << "\n\n" << (parsed.empty() ? app.help() : parsed.back()->help());
    return 2;
  }

  std::vector<std::string> args(argv, argv + argc);
  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) return cmd_train(tr, args, out, err);
    if (*cloak_cmd) return cmd_cloak(ck, out, err);
    if (*visual_cmd) return cmd_eval_visual(ev_visual, out, err);
    if (*id_cmd) return cmd_eval_id(ev_id, out, err);
    if (*swap_cmd) return cmd_eval_swap(sw, out, err);
    if (*report_cmd) return cmd_report(report_run, report_out, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DatasetError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cout, std::cerr); }

}  // namespace nullswap
