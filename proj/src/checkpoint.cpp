#include "seqcl/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace seqcl {

namespace {

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("truncated checkpoint " + path.string());
    return v;
}

template <class S>
constexpr const char* dtype_name() {
    return sizeof(S) == 4 ? "f32" : "f64";
}

struct Header {
    CheckpointInfo info;
    std::streamoff data_start = 0;
};

Header read_header(std::ifstream& is, const std::filesystem::path& path) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError(path.string() + " is not a checkpoint");
    const auto version = get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint version " + std::to_string(version) + " is not supported");
    const auto manifest_len = get<std::uint64_t>(is, path);
    const auto meta_len = get<std::uint64_t>(is, path);
    std::string manifest(manifest_len, '\0'), meta(meta_len, '\0');
    if (!is.read(manifest.data(), static_cast<std::streamsize>(manifest_len)) ||
        !is.read(meta.data(), static_cast<std::streamsize>(meta_len)))
        throw FormatError("truncated checkpoint " + path.string());
    Header h;
    h.info.metadata = std::move(meta);
    h.data_start = is.tellg();
    std::istringstream ms(manifest);
    std::string line;
    while (std::getline(ms, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        CheckpointEntry e;
        int trainable = 1;
        if (!(ls >> e.name >> e.rows >> e.cols >> e.dtype >> e.offset >> trainable) ||
            (e.dtype != "f32" && e.dtype != "f64"))
            throw FormatError("bad checkpoint manifest line: " + line);
        e.trainable = trainable != 0;
        h.info.entries.push_back(std::move(e));
    }
    return h;
}

}  // namespace

template <class S>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<S>& params, const std::string& metadata) {
    std::ostringstream manifest;
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        manifest << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << ' ' << dtype_name<S>() << ' '
                 << offset << ' ' << (p.trainable ? 1 : 0) << '\n';
        offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(S);
    }
    const std::string m = manifest.str();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open " + tmp.string() + " for writing");
        os.write(kCheckpointMagic, 8);
        put<std::uint32_t>(os, kCheckpointVersion);
        put<std::uint64_t>(os, m.size());
        put<std::uint64_t>(os, metadata.size());
        os.write(m.data(), static_cast<std::streamsize>(m.size()));
        os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& v = params[i].value;
            os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(S)));
        }
        if (!os) throw FormatError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    return read_header(is, path).info;
}

template <class S>
std::string load_checkpoint(const std::filesystem::path& path, ParamStore<S>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path.string());
    Header h = read_header(is, path);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : h.info.entries) by_name[e.name] = &e;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw FormatError("checkpoint has no array named " + p.name);
        const CheckpointEntry& e = *it->second;
        if (e.rows != p.value.rows() || e.cols != p.value.cols())
            throw FormatError("checkpoint array " + p.name + " has shape " + shape_str({e.rows, e.cols}) +
                              ", model expects " + shape_str(shape_of(p.value)));
        is.seekg(h.data_start + static_cast<std::streamoff>(e.offset));
        const auto n = static_cast<std::size_t>(e.rows * e.cols);
        if (e.dtype == "f32") {
            std::vector<float> buf(n);
            if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float))))
                throw FormatError("truncated data for " + p.name);
            for (std::size_t j = 0; j < n; ++j) p.value.data()[j] = static_cast<S>(buf[j]);
        } else {
            std::vector<double> buf(n);
            if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(double))))
                throw FormatError("truncated data for " + p.name);
            for (std::size_t j = 0; j < n; ++j) p.value.data()[j] = static_cast<S>(buf[j]);
        }
    }
    return h.info.metadata;
}

template void save_checkpoint<float>(const std::filesystem::path&, const ParamStore<float>&, const std::string&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamStore<double>&, const std::string&);
template std::string load_checkpoint<float>(const std::filesystem::path&, ParamStore<float>&);
template std::string load_checkpoint<double>(const std::filesystem::path&, ParamStore<double>&);

}  // namespace seqcl
