#pragma once

// Checkpoint = libtorch archive at `path` + JSON sidecar at `path.json`.
// The sidecar always carries {"format_version", "kind"}; readers refuse a
// mismatch of either.

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace nullswap {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

/// Adds format_version and kind, then writes the sidecar.
void write_sidecar(const std::filesystem::path& checkpoint, const std::string& kind, nlohmann::json body);

/// Reads and validates the sidecar; throws CheckpointError on missing file,
/// malformed JSON, wrong kind or version mismatch.
nlohmann::json read_sidecar(const std::filesystem::path& checkpoint, const std::string& kind);

/// Hex digest of the archive bytes (first 12 hex digits of FNV-1a).
std::string checkpoint_hash(const std::filesystem::path& checkpoint);

}  // namespace nullswap
