#pragma once

// Glue shared by the command-line tool and the end-to-end tests: dataset
// splits, cached toy embedders and the cached perceptual net.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nullswap/data.hpp"
#include "nullswap/embedders.hpp"
#include "nullswap/losses.hpp"
#include "nullswap/trainer.hpp"

namespace nullswap {

/// $NULLSWAP_CACHE when set, otherwise `fallback`.
std::filesystem::path cache_dir(const std::filesystem::path& fallback = ".nullswap_cache");

struct DatasetSplits {
  IdentityDataset dataset;
  ImageSet train, val, test;
  /// Stable digest of records, splits and image size; keys cached artifacts.
  std::string fingerprint;
};

DatasetSplits load_splits(const std::filesystem::path& root, int64_t image_size);

using Logger = std::function<void(const std::string&)>;

/// Loads `<cache>/embedder_<name>_<fingerprint>_<spec digest>.pt` or trains
/// and stores it. Toy names are A, B and C (the architecture).
std::shared_ptr<ToyEmbedder> obtain_toy_embedder(const std::string& name, const DatasetSplits& data,
                                                 const ToyEmbedderSpec& spec, const std::filesystem::path& cache,
                                                 const Logger& log = {});

/// Same caching for the perceptual net.
PerceptualNet obtain_perceptual_net(const DatasetSplits& data, std::uint64_t seed, const std::filesystem::path& cache,
                                    const Logger& log = {});

/// Default toy spec for an embedder name: architecture from the name, seed
/// derived from `seed` and the name.
ToyEmbedderSpec toy_spec_for(const std::string& name, std::uint64_t seed, int64_t epochs);

/// Resolves every name in config.embedders and config.eval_embedders: entries
/// of config.pretrained_embedders ("name=path:dim:input_size") become
/// TorchScript embedders, anything else is a cached toy embedder.
EmbedderRegistry build_registry(const TrainConfig& config, const DatasetSplits& data,
                                const std::filesystem::path& cache, const Logger& log = {});

}  // namespace nullswap
