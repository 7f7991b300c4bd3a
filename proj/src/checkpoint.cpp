#include "pmf/checkpoint.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pmf {

uint32_t crc32(const void* data, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[8] = {'P', 'M', 'F', 'C', 'K', 'P', 'T', '1'};

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is, const char* what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError(std::string("checkpoint: truncated while reading ") + what);
    return v;
}

void put_blob(std::ostream& os, uint8_t kind, const std::string& name, const Tensor& t) {
    put(os, kind);
    put(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    const Shape& s = t.shape();
    put(os, uint32_t(s.rank));
    for (int i = 0; i < s.rank; ++i) put(os, uint64_t(s.d[i]));
    size_t bytes = size_t(t.numel()) * sizeof(double);
    os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(bytes));
    put(os, crc32(t.data(), bytes));
}

struct Blob {
    uint8_t kind;
    std::string name;
    Tensor data;
};

Blob get_blob(std::istream& is) {
    Blob b;
    b.kind = get<uint8_t>(is, "blob kind");
    uint32_t nl = get<uint32_t>(is, "blob name length");
    b.name.resize(nl);
    is.read(b.name.data(), nl);
    if (!is) throw DataError("checkpoint: truncated blob name");
    uint32_t rank = get<uint32_t>(is, "blob rank");
    if (rank > 4) throw DataError("checkpoint: blob '" + b.name + "' has invalid rank");
    Shape s;
    s.rank = int(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        auto d = get<uint64_t>(is, "blob dim");
        if (d == 0 || d > (uint64_t(1) << 32)) throw DataError("checkpoint: blob '" + b.name + "' has invalid dim");
        s.d[i] = int64_t(d);
    }
    b.data = Tensor::uninit(s);
    size_t bytes = size_t(s.numel()) * sizeof(double);
    is.read(reinterpret_cast<char*>(b.data.mut()), std::streamsize(bytes));
    if (!is) throw DataError("checkpoint: truncated data in blob '" + b.name + "'");
    uint32_t want = get<uint32_t>(is, "blob checksum");
    uint32_t got = crc32(b.data.data(), bytes);
    if (want != got)
        throw DataError("checkpoint: checksum mismatch in blob '" + b.name + "' (stored " +
                        std::to_string(want) + ", computed " + std::to_string(got) + ")");
    return b;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("save_checkpoint: cannot open " + tmp);
        f.write(kMagic, 8);
        put(f, uint64_t(ckpt.step));
        put(f, uint32_t(ckpt.config_text.size()));
        f.write(ckpt.config_text.data(), std::streamsize(ckpt.config_text.size()));
        uint32_t nblobs = uint32_t(ckpt.params.size()) +
                          (ckpt.has_optimizer ? uint32_t(ckpt.opt_m.size() + ckpt.opt_v.size()) : 0);
        put(f, nblobs);
        for (const auto& n : ckpt.params.names()) put_blob(f, 0, n, ckpt.params.at(n));
        if (ckpt.has_optimizer) {
            for (const auto& n : ckpt.opt_m.names()) put_blob(f, 1, n, ckpt.opt_m.at(n));
            for (const auto& n : ckpt.opt_v.names()) put_blob(f, 2, n, ckpt.opt_v.at(n));
        }
        if (!f) throw DataError("save_checkpoint: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("save_checkpoint: rename to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("load_checkpoint: bad magic in " + path);
    Checkpoint c;
    c.step = int64_t(get<uint64_t>(f, "step"));
    uint32_t clen = get<uint32_t>(f, "config length");
    c.config_text.resize(clen);
    f.read(c.config_text.data(), clen);
    if (!f) throw DataError("load_checkpoint: truncated config text");
    uint32_t nblobs = get<uint32_t>(f, "blob count");
    for (uint32_t i = 0; i < nblobs; ++i) {
        Blob b = get_blob(f);
        switch (b.kind) {
            case 0: c.params.add(b.name, std::move(b.data)); break;
            case 1:
                c.has_optimizer = true;
                c.opt_m.add(b.name, std::move(b.data));
                break;
            case 2:
                c.has_optimizer = true;
                c.opt_v.add(b.name, std::move(b.data));
                break;
            default: throw DataError("load_checkpoint: unknown blob kind in '" + b.name + "'");
        }
    }
    return c;
}

std::string inspect_checkpoint(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    std::ostringstream os;
    os << "checkpoint: " << path << "\n";
    os << "step: " << c.step << "\n";
    os << "parameters: " << c.params.size() << " tensors, " << c.params.total_scalars()
       << " scalars\n";
    os << "optimizer state: " << (c.has_optimizer ? "present" : "absent") << "\n";
    os << "config:\n";
    std::istringstream cfg(c.config_text);
    std::string line;
    while (std::getline(cfg, line)) os << "    " << line << "\n";
    os << "blobs:\n";
    for (const auto& n : c.params.names()) {
        const Tensor& t = c.params.at(n);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "    %-28s %-12s crc32=%08x\n", n.c_str(),
                      t.shape().str().c_str(), crc32(t.data(), size_t(t.numel()) * sizeof(double)));
        os << buf;
    }
    return os.str();
}

}  // namespace pmf
