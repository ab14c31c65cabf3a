#pragma once

// Parameter checkpoints.
//
// Layout (little-endian):
//   8 bytes  magic "SEQCLCKP"
//   u32      version (1)
//   u64      manifest length in bytes
//   u64      metadata length in bytes
//   manifest one line per array: "<name> <rows> <cols> <f32|f64> <offset> <trainable>"
//   metadata free text (the run configuration as JSON)
//   data     raw arrays, row-major; offsets are relative to the start of data

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "seqcl/tensor.hpp"

namespace seqcl {

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'Q', 'C', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Index rows = 0;
    Index cols = 0;
    std::string dtype;  // "f32" or "f64"
    std::uint64_t offset = 0;
    bool trainable = true;
};

struct CheckpointInfo {
    std::vector<CheckpointEntry> entries;
    std::string metadata;
};

template <class S>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<S>& params, const std::string& metadata = {});

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Overwrites every parameter of `params` from the file, converting dtype if
/// needed. Missing names or shape mismatches throw FormatError. Returns the
/// stored metadata.
template <class S>
std::string load_checkpoint(const std::filesystem::path& path, ParamStore<S>& params);

}  // namespace seqcl
