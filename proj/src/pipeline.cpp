#include "nullswap/pipeline.hpp"

#include <cstdlib>
#include <sstream>

#include "nullswap/checkpoint.hpp"
#include "nullswap/evalsuite.hpp"
#include "nullswap/hash.hpp"

namespace nullswap {

namespace fs = std::filesystem;

fs::path cache_dir(const fs::path& fallback) {
  if (const char* env = std::getenv("NULLSWAP_CACHE"); env && *env) return env;
  return fallback;
}

DatasetSplits load_splits(const fs::path& root, int64_t image_size) {
  DatasetSplits out;
  out.dataset = load_dataset_dir(root);
  out.train = load_split(out.dataset, Split::Train, image_size);
  out.val = load_split(out.dataset, Split::Val, image_size);
  out.test = load_split(out.dataset, Split::Test, image_size);
  std::ostringstream key;
  key << out.dataset.name() << '|' << image_size;
  for (const auto& r : out.dataset.records) {
    key << '|' << r.path.filename().string() << ':' << r.identity << ':' << static_cast<int>(r.split);
  }
  out.fingerprint = hex_digest(fnv1a(key.str()), 10);
  return out;
}

ToyEmbedderSpec toy_spec_for(const std::string& name, std::uint64_t seed, int64_t epochs) {
  ToyEmbedderSpec spec;
  spec.arch = parse_toy_arch(name);
  spec.epochs = epochs;
  spec.seed = fnv1a(name, seed * 0x100000001b3ULL + 0xcbf29ce484222325ULL);
  return spec;
}

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string spec_digest(const ToyEmbedderSpec& s) {
  std::ostringstream key;
  key << "prewhiten|" << to_string(s.arch) << '|' << s.dim << '|' << s.epochs << '|' << s.batch_size << '|'
      << format_number(s.learning_rate) << '|' << format_number(s.margin) << '|' << s.seed;
  return hex_digest(fnv1a(key.str()), 8);
}

}  // namespace

std::shared_ptr<ToyEmbedder> obtain_toy_embedder(const std::string& name, const DatasetSplits& data,
                                                 const ToyEmbedderSpec& spec, const fs::path& cache,
                                                 const Logger& log) {
  const auto path = cache / ("embedder_" + name + "_" + data.fingerprint + "_" + spec_digest(spec) + ".pt");
  if (fs::exists(path) && fs::exists(sidecar_path(path))) {
    auto e = ToyEmbedder::load(path);
    if (e->validation_top1() >= spec.target_top1) {
      say(log, "loaded toy embedder " + name + " from " + path.string());
      return e;
    }
  }
  say(log, "training toy embedder " + name + " (" + to_string(spec.arch) + ") on " + data.dataset.name());
  auto e = train_toy_embedder(name, spec, data.train, data.val);
  e->save(path);
  say(log, "toy embedder " + name + ": validation top-1 " + format_number(e->validation_top1()));
  return e;
}

PerceptualNet obtain_perceptual_net(const DatasetSplits& data, std::uint64_t seed, const fs::path& cache,
                                    const Logger& log) {
  const auto path = cache / ("perceptual_" + data.fingerprint + "_" + std::to_string(seed) + ".pt");
  if (fs::exists(path) && fs::exists(sidecar_path(path))) {
    say(log, "loaded perceptual net from " + path.string());
    return load_perceptual_net(path);
  }
  say(log, "training perceptual net on " + data.dataset.name());
  auto net = train_perceptual_net(data.train, seed);
  save_perceptual_net(net, path);
  return net;
}

EmbedderRegistry build_registry(const TrainConfig& config, const DatasetSplits& data, const fs::path& cache,
                                const Logger& log) {
  EmbedderRegistry registry;
  for (const auto& entry : config.pretrained_embedders) {
    // name=path:dim:input_size
    const auto eq = entry.find('=');
    const auto c2 = entry.rfind(':');
    const auto c1 = c2 == std::string::npos ? std::string::npos : entry.rfind(':', c2 - 1);
    if (eq == std::string::npos || c1 == std::string::npos || c1 < eq) {
      throw ConfigError("pretrained_embedders entry must be name=path:dim:input_size, got '" + entry + "'");
    }
    Preprocess pre;
    int64_t dim = 0;
    try {
      dim = std::stoll(entry.substr(c1 + 1, c2 - c1 - 1));
      pre.input_size = std::stoll(entry.substr(c2 + 1));
    } catch (const std::exception&) {
      throw ConfigError("pretrained_embedders entry has a non-numeric dim or input size: '" + entry + "'");
    }
    const auto name = entry.substr(0, eq);
    const fs::path weights = entry.substr(eq + 1, c1 - eq - 1);
    auto e = std::make_shared<TorchScriptEmbedder>(name, weights, dim, pre);
    if (!e->loaded()) say(log, "pretrained embedder " + name + ": weights not found at " + weights.string());
    registry.add(e);
  }
  std::vector<std::string> wanted = config.embedders;
  wanted.insert(wanted.end(), config.eval_embedders.begin(), config.eval_embedders.end());
  for (const auto& name : wanted) {
    if (registry.contains(name)) continue;
    registry.add(obtain_toy_embedder(name, data, toy_spec_for(name, config.seed, config.toy_embedder_epochs), cache, log));
  }
  return registry;
}

}  // namespace nullswap
