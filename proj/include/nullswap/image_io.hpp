#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace nullswap {

/// Reads an 8-bit image as RGB [3, H, W] float in [-1, 1]. When `size` > 0
/// the image is resized (area interpolation) to size x size.
torch::Tensor load_image(const std::filesystem::path& path, int64_t size = 0);

/// Writes [3, H, W] (or [1, 3, H, W]) in [-1, 1] as an 8-bit RGB PNG. Values
/// are clamped and rounded to the nearest 8-bit level.
void save_image(const torch::Tensor& image, const std::filesystem::path& path);

/// [-1, 1] -> [0, 1]
inline torch::Tensor to_unit_range(const torch::Tensor& x) { return (x + 1.0) * 0.5; }

/// Sorted list of *.png / *.jpg / *.jpeg files directly under `dir`.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace nullswap
