#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace nullswap {

enum class Split { Train = 0, Val = 1, Test = 2 };

const char* split_name(Split s);
Split parse_split(const std::string& name);

struct ImageRecord {
  std::filesystem::path path;  // absolute or relative to the working directory
  int64_t identity = 0;
  Split split = Split::Train;
};

struct IdentityDataset {
  std::filesystem::path root;
  std::vector<ImageRecord> records;
  int64_t image_size = 0;  // 0 = native size

  /// Sorted distinct identity ids.
  std::vector<int64_t> identities() const;
  int64_t identity_count() const { return static_cast<int64_t>(identities().size()); }
  std::vector<std::size_t> indices(Split s) const;
  /// Contiguous class index of an identity id (position in identities()).
  int64_t class_index(int64_t identity) const;
  std::string name() const { return root.filename().string(); }
};

/// Thrown with every problem found, one per line in what().
class DatasetError : public std::runtime_error {
 public:
  explicit DatasetError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

/// Annotation file: one `filename identity_id` pair per line (paths relative
/// to `root`). Optional split file: `filename split` with split 0/1/2 for
/// train/val/test. Without a split file each identity's images are split
/// 80/10/10 in filename-hash order, so every identity appears in train.
IdentityDataset load_identity_dataset(const std::filesystem::path& root, const std::filesystem::path& annotation_file,
                                      const std::optional<std::filesystem::path>& split_file = std::nullopt,
                                      bool check_decodable = true);

/// Convenience for directories written by generate_synthetic_dataset or laid
/// out the same way (annotations.txt, optional splits.txt).
IdentityDataset load_dataset_dir(const std::filesystem::path& root);

/// Decoded images of one split, in record order.
struct ImageSet {
  torch::Tensor images;               // [N, 3, S, S] in [-1, 1]
  std::vector<int64_t> labels;        // contiguous class index
  std::vector<int64_t> identities;    // original identity id
  std::vector<std::string> keys;      // file name, unique within the dataset
  int64_t size() const { return static_cast<int64_t>(keys.size()); }
};

ImageSet load_split(const IdentityDataset& dataset, Split split, int64_t image_size);

struct SyntheticFaceSpec {
  int64_t identities = 32;
  int64_t images_per_identity = 25;
  int64_t image_size = 64;
  double min_latent_separation = 0.35;
  // nuisance ranges
  double pose_shift = 0.04;       // fraction of the image size
  double pose_rotation_deg = 8.0;
  double pose_scale = 0.05;
  double illumination = 0.15;     // +- gain
  double background_jitter = 0.10;
  double texture_noise = 3.0;     // 8-bit standard deviation

  void validate() const;
};

/// Renders parametric face-like images into `out_dir` as PNGs and writes
/// `annotations.txt` and `splits.txt`. Output bytes depend only on (spec, seed).
IdentityDataset generate_synthetic_dataset(const SyntheticFaceSpec& spec, std::uint64_t seed,
                                           const std::filesystem::path& out_dir);

}  // namespace nullswap
