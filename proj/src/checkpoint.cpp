#include "nullswap/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "nullswap/hash.hpp"

namespace nullswap {

namespace fs = std::filesystem;

fs::path sidecar_path(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".json"); }

void write_sidecar(const fs::path& checkpoint, const std::string& kind, nlohmann::json body) {
  body["format_version"] = kCheckpointFormatVersion;
  body["kind"] = kind;
  std::ofstream out(sidecar_path(checkpoint));
  if (!out) throw CheckpointError("cannot write checkpoint sidecar " + sidecar_path(checkpoint).string());
  out << body.dump(2) << '\n';
}

nlohmann::json read_sidecar(const fs::path& checkpoint, const std::string& kind) {
  const auto path = sidecar_path(checkpoint);
  std::ifstream in(path);
  if (!in) throw CheckpointError("missing checkpoint sidecar " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint sidecar " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("format_version") || !j.contains("kind")) {
    throw CheckpointError("checkpoint sidecar " + path.string() + " lacks format_version/kind");
  }
  if (j["format_version"] != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint " + checkpoint.string() + " has format version " + j["format_version"].dump() +
                          ", this build reads version " + std::to_string(kCheckpointFormatVersion));
  }
  if (j["kind"] != kind) {
    throw CheckpointError("checkpoint " + checkpoint.string() + " holds a " + j["kind"].dump() + ", expected \"" +
                          kind + "\"");
  }
  return j;
}

std::string checkpoint_hash(const fs::path& checkpoint) {
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + checkpoint.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex_digest(fnv1a(bytes), 12);
}

}  // namespace nullswap
