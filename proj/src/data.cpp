#include "nullswap/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "nullswap/hash.hpp"
#include "nullswap/image_io.hpp"

namespace nullswap {

namespace fs = std::filesystem;

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train" || name == "0") return Split::Train;
  if (name == "val" || name == "1") return Split::Val;
  if (name == "test" || name == "2") return Split::Test;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

std::vector<int64_t> IdentityDataset::identities() const {
  std::set<int64_t> ids;
  for (const auto& r : records) ids.insert(r.identity);
  return {ids.begin(), ids.end()};
}

std::vector<std::size_t> IdentityDataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == s) out.push_back(i);
  return out;
}

int64_t IdentityDataset::class_index(int64_t identity) const {
  const auto ids = identities();
  auto it = std::lower_bound(ids.begin(), ids.end(), identity);
  if (it == ids.end() || *it != identity) throw std::out_of_range("unknown identity " + std::to_string(identity));
  return it - ids.begin();
}

namespace {

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out = "dataset errors:";
  for (const auto& l : lines) out += "\n  " + l;
  return out;
}

// Per-identity 80/10/10 assignment. Images of one identity are ordered by the
// hash of their file name, so the result does not depend on annotation order.
std::map<std::string, Split> default_splits(const std::vector<std::pair<std::string, int64_t>>& entries) {
  std::map<int64_t, std::vector<std::string>> by_id;
  for (const auto& [file, id] : entries) by_id[id].push_back(file);
  std::map<std::string, Split> out;
  for (auto& [id, files] : by_id) {
    std::sort(files.begin(), files.end(), [](const std::string& a, const std::string& b) {
      const auto ha = fnv1a(a), hb = fnv1a(b);
      return ha != hb ? ha < hb : a < b;
    });
    const std::size_t n = files.size();
    const std::size_t n_train = std::max<std::size_t>(1, n * 8 / 10);
    const std::size_t n_val = (n - n_train) / 2;
    for (std::size_t i = 0; i < n; ++i) {
      out[files[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
    }
  }
  return out;
}

}  // namespace

DatasetError::DatasetError(std::vector<std::string> problems)
    : std::runtime_error(join_lines(problems)), problems_(std::move(problems)) {}

IdentityDataset load_identity_dataset(const fs::path& root, const fs::path& annotation_file,
                                      const std::optional<fs::path>& split_file, bool check_decodable) {
  std::vector<std::string> problems;
  std::ifstream ann(annotation_file);
  if (!ann) throw DatasetError({"cannot open annotation file " + annotation_file.string()});

  std::vector<std::pair<std::string, int64_t>> entries;
  std::set<std::string> seen;
  std::string line;
  for (int line_no = 1; std::getline(ann, line); ++line_no) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string file;
    int64_t id = 0;
    if (!(is >> file >> id)) {
      problems.push_back(annotation_file.filename().string() + ":" + std::to_string(line_no) + ": malformed line");
      continue;
    }
    if (!seen.insert(file).second) {
      problems.push_back("duplicate annotation for " + file);
      continue;
    }
    entries.emplace_back(file, id);
  }

  std::map<std::string, Split> splits;
  if (split_file) {
    std::ifstream sf(*split_file);
    if (!sf) {
      problems.push_back("cannot open split file " + split_file->string());
    } else {
      for (int line_no = 1; std::getline(sf, line); ++line_no) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string file, s;
        if (!(is >> file >> s)) {
          problems.push_back(split_file->filename().string() + ":" + std::to_string(line_no) + ": malformed line");
          continue;
        }
        try {
          splits[file] = parse_split(s);
        } catch (const std::invalid_argument& e) {
          problems.push_back(split_file->filename().string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
      }
    }
  } else {
    splits = default_splits(entries);
  }

  IdentityDataset ds;
  ds.root = root;
  for (const auto& [file, id] : entries) {
    const fs::path p = root / file;
    if (!fs::exists(p)) {
      problems.push_back("missing image " + p.string());
      continue;
    }
    if (check_decodable && cv::imread(p.string(), cv::IMREAD_COLOR).empty()) {
      problems.push_back("undecodable image " + p.string());
      continue;
    }
    auto it = splits.find(file);
    if (it == splits.end()) {
      problems.push_back("no split assignment for " + file);
      continue;
    }
    ds.records.push_back({p, id, it->second});
  }
  if (ds.records.empty() && problems.empty()) problems.push_back("annotation file lists no images");
  if (!problems.empty()) throw DatasetError(std::move(problems));
  return ds;
}

IdentityDataset load_dataset_dir(const fs::path& root) {
  const auto split = root / "splits.txt";
  return load_identity_dataset(root, root / "annotations.txt",
                               fs::exists(split) ? std::optional<fs::path>(split) : std::nullopt, false);
}

ImageSet load_split(const IdentityDataset& dataset, Split split, int64_t image_size) {
  ImageSet set;
  std::vector<torch::Tensor> images;
  const auto ids = dataset.identities();
  for (std::size_t i : dataset.indices(split)) {
    const auto& r = dataset.records[i];
    images.push_back(load_image(r.path, image_size));
    set.identities.push_back(r.identity);
    set.labels.push_back(std::lower_bound(ids.begin(), ids.end(), r.identity) - ids.begin());
    set.keys.push_back(r.path.filename().string());
  }
  if (images.empty()) {
    set.images = torch::empty({0, 3, image_size, image_size});
  } else {
    set.images = torch::stack(images);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Synthetic faces

void SyntheticFaceSpec::validate() const {
  if (identities < 1) throw std::invalid_argument("synthetic spec: identities must be >= 1");
  if (images_per_identity < 1) throw std::invalid_argument("synthetic spec: images_per_identity must be >= 1");
  if (image_size < 16 || image_size % 4 != 0) {
    throw std::invalid_argument("synthetic spec: image_size must be a multiple of 4 and >= 16");
  }
}

namespace {

constexpr int kLatentDims = 18;
using Latent = std::array<double, kLatentDims>;

double lerp(double a, double b, double t) { return a + (b - a) * t; }

cv::Scalar bgr(double r, double g, double b) { return cv::Scalar(b, g, r); }

cv::Scalar skin_color(const Latent& z) {
  const double t = z[2];
  const double tint = (z[3] - 0.5) * 30.0;
  return bgr(lerp(238, 115, t) + tint, lerp(206, 78, t), lerp(178, 52, t) - tint);
}

cv::Scalar hair_color(const Latent& z) {
  // black -> dark brown -> auburn -> blond
  static const double palette[4][3] = {{25, 22, 20}, {85, 55, 35}, {150, 70, 35}, {215, 185, 120}};
  const double x = z[4] * 3.0;
  const int i = std::min(2, static_cast<int>(x));
  const double f = x - i;
  return bgr(lerp(palette[i][0], palette[i + 1][0], f), lerp(palette[i][1], palette[i + 1][1], f),
             lerp(palette[i][2], palette[i + 1][2], f));
}

cv::Scalar iris_color(const Latent& z) {
  static const double palette[3][3] = {{70, 45, 25}, {60, 110, 70}, {60, 100, 170}};
  const double x = z[9] * 2.0;
  const int i = std::min(1, static_cast<int>(x));
  const double f = x - i;
  return bgr(lerp(palette[i][0], palette[i + 1][0], f), lerp(palette[i][1], palette[i + 1][1], f),
             lerp(palette[i][2], palette[i + 1][2], f));
}

cv::Scalar scaled(const cv::Scalar& c, double k) { return cv::Scalar(c[0] * k, c[1] * k, c[2] * k); }

struct Nuisance {
  double dx, dy, rotation, scale, gain, gradient, gradient_angle, mouth_jitter;
  cv::Scalar background;
};

cv::Mat render_face(const Latent& z, const Nuisance& nz, int canvas) {
  const double R = canvas;
  auto P = [&](double x, double y) { return cv::Point(static_cast<int>(std::lround(x * R * 16)), static_cast<int>(std::lround(y * R * 16))); };
  auto S = [&](double a, double b) { return cv::Size(static_cast<int>(std::lround(a * R * 16)), static_cast<int>(std::lround(b * R * 16))); };
  auto T = [&](double t) { return std::max(1, static_cast<int>(std::lround(t * R))); };
  constexpr int shift = 4;  // sub-pixel precision for drawing
  constexpr int aa = cv::LINE_AA;

  cv::Mat img(canvas, canvas, CV_8UC3, nz.background);
  const double cx = 0.5, cy = 0.52;
  const double fw = lerp(0.25, 0.35, z[0]);
  const double fh = lerp(0.32, 0.42, z[1]);
  const cv::Scalar skin = skin_color(z);
  const cv::Scalar hair = hair_color(z);

  // hair mass behind the head, then neck and face
  cv::ellipse(img, P(cx, cy - 0.05), S(fw * 1.18, fh * 1.05), 0, 0, 360, hair, cv::FILLED, aa, shift);
  cv::rectangle(img, P(cx - fw * 0.45, cy + fh * 0.6), P(cx + fw * 0.45, 1.05), scaled(skin, 0.85), cv::FILLED, aa,
                shift);
  cv::ellipse(img, P(cx, cy), S(fw, fh), 0, 0, 360, skin, cv::FILLED, aa, shift);
  // fringe
  const double fringe = lerp(0.18, 0.45, z[5]);
  cv::ellipse(img, P(cx, cy - fh * 0.95), S(fw * 1.05, fh * fringe), 0, 0, 360, hair, cv::FILLED, aa, shift);

  // eyes
  const double ex = lerp(0.10, 0.17, z[6]);
  const double er = lerp(0.030, 0.052, z[7]);
  const double ey = cy + lerp(-0.12, -0.04, z[8]);
  for (int side : {-1, 1}) {
    const double x = cx + side * ex;
    cv::ellipse(img, P(x, ey), S(er * 1.5, er), 0, 0, 360, bgr(245, 245, 240), cv::FILLED, aa, shift);
    cv::circle(img, P(x, ey), static_cast<int>(std::lround(er * 0.8 * R * 16)), iris_color(z), cv::FILLED, aa, shift);
    cv::circle(img, P(x, ey), static_cast<int>(std::lround(er * 0.35 * R * 16)), bgr(15, 15, 15), cv::FILLED, aa,
               shift);
    // brows
    const double slope = (z[11] - 0.5) * 0.06 * side;
    const double by = ey - er * 1.9;
    cv::line(img, P(x - er * 1.6, by + slope), P(x + er * 1.6, by - slope), scaled(hair, 0.8),
             T(lerp(0.012, 0.03, z[10])), aa, shift);
  }

  // nose
  const double nl = lerp(0.07, 0.15, z[12]);
  const double nw = lerp(0.03, 0.07, z[13]);
  std::vector<cv::Point> nose{P(cx, ey + er), P(cx - nw, ey + er + nl), P(cx + nw, ey + er + nl)};
  cv::fillConvexPoly(img, nose, scaled(skin, 0.78), aa, shift);

  // mouth
  const double mw = lerp(0.07, 0.15, z[14]);
  const double my = cy + lerp(0.16, 0.24, z[16]);
  const double curv = std::clamp((z[15] - 0.5) * 2.0 + nz.mouth_jitter, -1.0, 1.0);
  const cv::Scalar lips = bgr(lerp(200, 120, z[17]), lerp(90, 40, z[17]), lerp(90, 50, z[17]));
  const double mh = std::max(0.004, std::abs(curv) * 0.05);
  if (curv >= 0) {
    cv::ellipse(img, P(cx, my - mh), S(mw, mh), 0, 0, 180, lips, T(0.022), aa, shift);
  } else {
    cv::ellipse(img, P(cx, my + mh), S(mw, mh), 0, 180, 360, lips, T(0.022), aa, shift);
  }

  // pose
  cv::Mat M = cv::getRotationMatrix2D(cv::Point2f(static_cast<float>(R * 0.5), static_cast<float>(R * 0.5)),
                                      nz.rotation, nz.scale);
  M.at<double>(0, 2) += nz.dx * R;
  M.at<double>(1, 2) += nz.dy * R;
  cv::Mat out;
  cv::warpAffine(img, out, M, img.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, nz.background);
  return out;
}

double latent_distance(const Latent& a, const Latent& b) {
  double d = 0.0;
  for (int i = 0; i < kLatentDims; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

}  // namespace

IdentityDataset generate_synthetic_dataset(const SyntheticFaceSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  std::mt19937_64 id_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Latent> latents;
  int attempts = 0;
  while (static_cast<int64_t>(latents.size()) < spec.identities) {
    Latent z;
    for (auto& v : z) v = unit(id_rng);
    const bool separated = std::all_of(latents.begin(), latents.end(), [&](const Latent& o) {
      return latent_distance(o, z) >= spec.min_latent_separation;
    });
    if (separated) latents.push_back(z);
    if (++attempts > 100000) throw std::runtime_error("synthetic faces: cannot satisfy latent separation");
  }

  const int canvas = static_cast<int>(spec.image_size * 4);
  const int size = static_cast<int>(spec.image_size);
  std::ofstream ann(out_dir / "annotations.txt");
  std::ofstream spl(out_dir / "splits.txt");
  IdentityDataset ds;
  ds.root = out_dir;
  ds.image_size = spec.image_size;

  const int64_t n = spec.images_per_identity;
  const int64_t n_train = std::max<int64_t>(1, n * 8 / 10);
  const int64_t n_val = (n - n_train) / 2;

  for (int64_t id = 0; id < spec.identities; ++id) {
    for (int64_t k = 0; k < n; ++k) {
      std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(id * 100003 + k + 1)));
      auto sym = [&](double range) { return (unit(rng) * 2.0 - 1.0) * range; };
      Nuisance nz;
      nz.dx = sym(spec.pose_shift);
      nz.dy = sym(spec.pose_shift);
      nz.rotation = sym(spec.pose_rotation_deg);
      nz.scale = 1.0 + sym(spec.pose_scale);
      nz.gain = 1.0 + sym(spec.illumination);
      nz.gradient = sym(spec.illumination);
      nz.gradient_angle = unit(rng) * 2.0 * std::numbers::pi;
      nz.mouth_jitter = sym(0.15);
      const double bg = lerp(0.35, 0.65, unit(rng));
      nz.background = cv::Scalar(255.0 * std::clamp(bg + sym(spec.background_jitter), 0.0, 1.0),
                                 255.0 * std::clamp(bg + sym(spec.background_jitter), 0.0, 1.0),
                                 255.0 * std::clamp(bg + sym(spec.background_jitter), 0.0, 1.0));

      cv::Mat big = render_face(latents[static_cast<std::size_t>(id)], nz, canvas);
      cv::Mat small;
      cv::resize(big, small, cv::Size(size, size), 0, 0, cv::INTER_AREA);
      cv::Mat f;
      small.convertTo(f, CV_32FC3);
      std::normal_distribution<double> noise(0.0, spec.texture_noise);
      const double gx = std::cos(nz.gradient_angle), gy = std::sin(nz.gradient_angle);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double u = (x + 0.5) / size - 0.5, v = (y + 0.5) / size - 0.5;
          const double light = nz.gain * (1.0 + nz.gradient * 2.0 * (u * gx + v * gy));
          auto& px = f.at<cv::Vec3f>(y, x);
          for (int c = 0; c < 3; ++c) px[c] = static_cast<float>(px[c] * light + noise(rng));
        }
      }
      cv::Mat out;
      f.convertTo(out, CV_8UC3);  // saturating, rounds to nearest

      char name[64];
      std::snprintf(name, sizeof name, "id%03lld_%03lld.png", static_cast<long long>(id), static_cast<long long>(k));
      const fs::path p = out_dir / name;
      if (!cv::imwrite(p.string(), out)) throw std::runtime_error("cannot write " + p.string());
      const Split split = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
      ann << name << ' ' << id << '\n';
      spl << name << ' ' << static_cast<int>(split) << '\n';
      ds.records.push_back({p, id, split});
    }
  }
  return ds;
}

}  // namespace nullswap
