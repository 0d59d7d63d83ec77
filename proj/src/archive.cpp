#include "clipdecomp/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "clipdecomp/errors.hpp"

static_assert(std::endian::native == std::endian::little, "archive codec assumes a little-endian host");

namespace clipdecomp {

namespace {

constexpr char kMagic[4] = {'N', 'T', 'A', '1'};

[[noreturn]] void fail(const std::string& origin, std::size_t offset, const std::string& what) {
    throw FormatError(origin + ": " + what + " (offset " + std::to_string(offset) + ")");
}

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    const std::string& origin;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (pos + n > bytes.size()) fail(origin, pos, std::string("truncated while reading ") + what);
    }
    template <typename T>
    T scalar(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
};

template <typename T>
void append_scalar(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

std::size_t ArchiveEntry::numel() const {
    std::size_t n = 1;
    for (std::uint64_t d : dims) n *= static_cast<std::size_t>(d);
    return n;
}

Tensor ArchiveEntry::to_tensor() const {
    std::vector<std::size_t> shape(dims.begin(), dims.end());
    Tensor t(shape);
    if (dtype == DType::f32) {
        std::memcpy(t.data.data(), payload.data(), payload.size());
    } else {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double v;
            std::memcpy(&v, payload.data() + i * 8, 8);
            t.data[i] = static_cast<float>(v);
        }
    }
    return t;
}

std::vector<double> ArchiveEntry::to_f64() const {
    std::vector<double> out(numel());
    if (dtype == DType::f64) {
        std::memcpy(out.data(), payload.data(), payload.size());
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) {
            float v;
            std::memcpy(&v, payload.data() + i * 4, 4);
            out[i] = v;
        }
    }
    return out;
}

ArchiveEntry ArchiveEntry::from_tensor(const Tensor& t) {
    ArchiveEntry e;
    e.dtype = DType::f32;
    e.dims.assign(t.shape.begin(), t.shape.end());
    e.payload.resize(t.numel() * 4);
    std::memcpy(e.payload.data(), t.data.data(), e.payload.size());
    return e;
}

ArchiveEntry ArchiveEntry::from_f64(const std::vector<std::uint64_t>& dims, const std::vector<double>& values) {
    ArchiveEntry e;
    e.dtype = DType::f64;
    e.dims = dims;
    if (e.numel() != values.size()) {
        throw ShapeError("archive entry dims do not match value count " + std::to_string(values.size()));
    }
    e.payload.resize(values.size() * 8);
    std::memcpy(e.payload.data(), values.data(), e.payload.size());
    return e;
}

Archive decode_archive(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    Reader r{bytes, origin};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(origin, 0, "bad magic, expected NTA1");
    r.pos = 4;

    const std::uint32_t count = r.scalar<std::uint32_t>("entry count");

    struct Header {
        std::string name;
        ArchiveEntry entry;
        std::size_t payload_bytes;
    };
    std::vector<Header> headers;
    headers.reserve(count);

    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.scalar<std::uint16_t>("name length");
        r.need(name_len, "name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
        r.pos += name_len;

        const std::uint8_t dtype_raw = r.scalar<std::uint8_t>("dtype");
        if (dtype_raw > 1) fail(origin, r.pos - 1, "unknown dtype " + std::to_string(dtype_raw) + " for '" + name + "'");
        const std::uint8_t ndim = r.scalar<std::uint8_t>("ndim");

        Header h;
        h.name = std::move(name);
        h.entry.dtype = static_cast<DType>(dtype_raw);
        h.entry.dims.resize(ndim);
        for (std::uint8_t d = 0; d < ndim; ++d) h.entry.dims[d] = r.scalar<std::uint64_t>("dimension");
        h.payload_bytes = h.entry.numel() * h.entry.scalar_size();
        headers.push_back(std::move(h));
    }

    std::size_t total_payload = 0;
    for (const auto& h : headers) total_payload += h.payload_bytes;
    if (bytes.size() - r.pos != total_payload) {
        fail(origin, r.pos,
             "payload size mismatch: declared " + std::to_string(total_payload) + " bytes, file has " +
                 std::to_string(bytes.size() - r.pos));
    }

    Archive out;
    for (auto& h : headers) {
        h.entry.payload.assign(bytes.begin() + r.pos, bytes.begin() + r.pos + h.payload_bytes);
        r.pos += h.payload_bytes;
        if (!out.emplace(h.name, std::move(h.entry)).second) {
            fail(origin, r.pos, "duplicate entry name '" + h.name + "'");
        }
    }
    return out;
}

std::vector<std::uint8_t> encode_archive(const Archive& archive) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    append_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(archive.size()));
    for (const auto& [name, entry] : archive) {
        if (name.size() > 0xFFFF) {
            throw FormatError("entry name too long: " + std::to_string(name.size()) + " bytes");
        }
        append_scalar<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        append_scalar<std::uint8_t>(out, static_cast<std::uint8_t>(entry.dtype));
        append_scalar<std::uint8_t>(out, static_cast<std::uint8_t>(entry.dims.size()));
        for (std::uint64_t d : entry.dims) append_scalar<std::uint64_t>(out, d);
    }
    for (const auto& [name, entry] : archive) {
        const std::size_t expect = entry.numel() * entry.scalar_size();
        if (entry.payload.size() != expect) {
            throw FormatError("entry '" + name + "' payload is " + std::to_string(entry.payload.size()) +
                              " bytes, dims require " + std::to_string(expect));
        }
        out.insert(out.end(), entry.payload.begin(), entry.payload.end());
    }
    return out;
}

Archive load_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path + ": cannot open (offset 0)");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_archive(bytes, path);
}

void save_archive(const Archive& archive, const std::string& path) {
    const auto bytes = encode_archive(archive);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(path + ": cannot open for writing (offset 0)");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(path + ": write failed");
}

}  // namespace clipdecomp
