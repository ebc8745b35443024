#include "nullswap/image_io.hpp"

#include <algorithm>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace nullswap {

torch::Tensor load_image(const std::filesystem::path& path, int64_t size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image: " + path.string());
  if (size > 0 && (bgr.rows != size || bgr.cols != size)) {
    cv::resize(bgr, bgr, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0, cv::INTER_AREA);
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(127.5).sub(1.0).contiguous();
}

void save_image(const torch::Tensor& image, const std::filesystem::path& path) {
  auto x = image.detach().to(torch::kCPU);
  if (x.dim() == 4) {
    if (x.size(0) != 1) throw std::invalid_argument("save_image: expected a single image");
    x = x.squeeze(0);
  }
  if (x.dim() != 3 || x.size(0) != 3) throw std::invalid_argument("save_image: expected [3, H, W]");
  auto bytes = x.to(torch::kFloat32).add(1.0).mul(127.5).clamp(0.0, 255.0).round().to(torch::kUInt8);
  bytes = bytes.permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3, bytes.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write image: " + path.string());
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace nullswap
