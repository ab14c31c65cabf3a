#pragma once

// Fixed-size record container shared by dataset ingestion and episode dumps.
//
// Layout (little-endian):
//   8 bytes  magic "SEQCLREC"
//   u32      version (1)
//   u32      dtype (0 = uint8, 1 = float32)
//   u64      record count
//   u64      elements per record
//   payload  count × elements values

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace seqcl {

enum class RecordDtype : std::uint32_t { u8 = 0, f32 = 1 };

inline constexpr char kRecordMagic[8] = {'S', 'E', 'Q', 'C', 'L', 'R', 'E', 'C'};
inline constexpr std::uint32_t kRecordVersion = 1;

struct RecordSet {
    RecordDtype dtype = RecordDtype::f32;
    std::uint64_t elements = 0;
    /// Values as doubles; u8 records are stored scaled to [0, 1] on read and
    /// rounded from [0, 1] on write.
    std::vector<std::vector<double>> records;
};

void write_records(const std::filesystem::path& path, const RecordSet& set);
RecordSet read_records(const std::filesystem::path& path);

/// Class manifest for image datasets: one "<class-name> <relative-path>" per line.
struct ClassManifestEntry {
    std::string name;
    std::filesystem::path file;
};
std::vector<ClassManifestEntry> read_class_manifest(const std::filesystem::path& path);
void write_class_manifest(const std::filesystem::path& path, const std::vector<ClassManifestEntry>& entries);

}  // namespace seqcl
