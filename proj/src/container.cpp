#include "seqcl/container.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "seqcl/errors.hpp"

namespace seqcl {

static_assert(std::endian::native == std::endian::little, "record container assumes a little-endian host");

namespace {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated header in " + path.string());
    return v;
}

}  // namespace

void write_records(const std::filesystem::path& path, const RecordSet& set) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os.write(kRecordMagic, sizeof(kRecordMagic));
    put<std::uint32_t>(os, kRecordVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(set.dtype));
    put<std::uint64_t>(os, set.records.size());
    put<std::uint64_t>(os, set.elements);
    for (const auto& r : set.records) {
        if (r.size() != set.elements)
            throw FormatError("record of " + std::to_string(r.size()) + " elements in a container of " +
                              std::to_string(set.elements));
        if (set.dtype == RecordDtype::f32) {
            for (double v : r) put<float>(os, static_cast<float>(v));
        } else {
            for (double v : r) put<std::uint8_t>(os, static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
        }
    }
    if (!os) throw FormatError("write failed for " + path.string());
}

RecordSet read_records(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kRecordMagic, 8) != 0)
        throw FormatError(path.string() + " is not a record container");
    const auto version = get<std::uint32_t>(is, path);
    if (version != kRecordVersion) throw FormatError("unsupported container version " + std::to_string(version));
    RecordSet set;
    const auto dtype = get<std::uint32_t>(is, path);
    if (dtype > 1) throw FormatError("unknown dtype " + std::to_string(dtype) + " in " + path.string());
    set.dtype = static_cast<RecordDtype>(dtype);
    const auto count = get<std::uint64_t>(is, path);
    set.elements = get<std::uint64_t>(is, path);
    set.records.assign(count, std::vector<double>(set.elements));
    for (auto& r : set.records)
        for (auto& v : r)
            v = set.dtype == RecordDtype::f32 ? static_cast<double>(get<float>(is, path))
                                              : get<std::uint8_t>(is, path) / 255.0;
    return set;
}

std::vector<ClassManifestEntry> read_class_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open manifest " + path.string());
    std::vector<ClassManifestEntry> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        ClassManifestEntry e;
        std::string file;
        if (!(ls >> e.name >> file)) throw FormatError("malformed manifest line: " + line);
        e.file = path.parent_path() / file;
        out.push_back(std::move(e));
    }
    return out;
}

void write_class_manifest(const std::filesystem::path& path, const std::vector<ClassManifestEntry>& entries) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    os << "# class file\n";
    for (const auto& e : entries) os << e.name << ' ' << e.file.generic_string() << '\n';
}

}  // namespace seqcl
