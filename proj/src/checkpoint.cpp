#include "cat/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "cat/errors.hpp"

namespace cat {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'T', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw DataError(path + ": truncated checkpoint");
    return v;
}

void write_entry(std::ofstream& out, const std::string& name, const Array& a) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(a.shape.size()));
    for (int64_t d : a.shape) write_pod<int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(double)));
}

// Reads one entry whose name and shape are already known.
void read_entry(std::ifstream& in, const std::string& path, const std::string& want_name,
                Array& into) {
    const uint32_t name_len = read_pod<uint32_t>(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw DataError(path + ": truncated checkpoint");
    if (name != want_name)
        throw DataError(path + ": array \"" + name + "\" where \"" + want_name +
                        "\" was expected");
    const uint32_t ndim = read_pod<uint32_t>(in, path);
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = read_pod<int64_t>(in, path);
    if (shape != into.shape)
        throw DataError(path + ": array \"" + name + "\" has shape " + shape_str(shape) +
                        ", expected " + shape_str(into.shape));
    if (!in.read(reinterpret_cast<char*>(into.values.data()),
                 static_cast<std::streamsize>(into.values.size() * sizeof(double))))
        throw DataError(path + ": truncated checkpoint");
}

}  // namespace

void save_checkpoint(const std::string& path, const EncoderParams& params,
                     const ProjectionParams* projection) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);

    out.write(kMagic, sizeof(kMagic));
    write_pod<int64_t>(out, params.config.layers);
    write_pod<int64_t>(out, params.config.heads);
    write_pod<int64_t>(out, params.config.d_h);
    write_pod<int64_t>(out, params.config.d_v);
    write_pod<int64_t>(out, params.config.max_len);
    write_pod<int64_t>(out, params.config.ffn);
    write_pod<double>(out, params.config.dropout);
    write_pod<int64_t>(out, params.num_classes);
    write_pod<int64_t>(out, projection ? projection->d_k() : 0);

    write_pod<uint64_t>(out, params.count());
    for (size_t i = 0; i < params.count(); ++i)
        write_entry(out, params.names[i], params.arrays[i]);
    if (projection) {
        write_entry(out, "proj.w1", projection->w1);
        write_entry(out, "proj.w2", projection->w2);
    }
    if (!out) throw DataError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);

    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError(path + ": not a checkpoint file");

    EncoderConfig cfg;
    cfg.layers = read_pod<int64_t>(in, path);
    cfg.heads = read_pod<int64_t>(in, path);
    cfg.d_h = read_pod<int64_t>(in, path);
    cfg.d_v = read_pod<int64_t>(in, path);
    cfg.max_len = read_pod<int64_t>(in, path);
    cfg.ffn = read_pod<int64_t>(in, path);
    cfg.dropout = read_pod<double>(in, path);
    const int64_t num_classes = read_pod<int64_t>(in, path);
    const int64_t d_k = read_pod<int64_t>(in, path);

    LoadedCheckpoint loaded{EncoderParams::init(cfg, num_classes, 0), std::nullopt};
    EncoderParams& params = loaded.encoder;

    const uint64_t count = read_pod<uint64_t>(in, path);
    if (count != params.count())
        throw DataError(path + ": " + std::to_string(count) + " arrays, expected " +
                        std::to_string(params.count()));
    for (size_t i = 0; i < count; ++i)
        read_entry(in, path, params.names[i], params.arrays[i]);

    if (d_k > 0) {
        ProjectionParams proj = ProjectionParams::init(cfg.d_h, d_k, 0);
        read_entry(in, path, "proj.w1", proj.w1);
        read_entry(in, path, "proj.w2", proj.w2);
        loaded.projection = std::move(proj);
    }
    return loaded;
}

}  // namespace cat
