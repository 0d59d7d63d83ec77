#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "clipdecomp/tensor.hpp"

namespace clipdecomp {

// Named-tensor archive, magic "NTA1", little-endian throughout.
//
//   magic      4 bytes "NTA1"
//   count      u32
//   per entry: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
//              u8 ndim, ndim x u64 dims
//   payloads   concatenated row-major, in entry order
//
// Entries are kept sorted by name, so a saved file has a canonical layout.

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct ArchiveEntry {
    DType dtype = DType::f32;
    std::vector<std::uint64_t> dims;
    std::vector<std::uint8_t> payload;  // raw little-endian scalars

    std::size_t numel() const;
    std::size_t scalar_size() const { return dtype == DType::f32 ? 4 : 8; }

    Tensor to_tensor() const;            // f64 entries are narrowed to f32
    std::vector<double> to_f64() const;  // either dtype, widened as needed

    static ArchiveEntry from_tensor(const Tensor& t);
    static ArchiveEntry from_f64(const std::vector<std::uint64_t>& dims, const std::vector<double>& values);
};

using Archive = std::map<std::string, ArchiveEntry>;

Archive load_archive(const std::string& path);
void save_archive(const Archive& archive, const std::string& path);

// In-memory codec used by the file functions; exposed for tests.
Archive decode_archive(const std::vector<std::uint8_t>& bytes, const std::string& origin);
std::vector<std::uint8_t> encode_archive(const Archive& archive);

}  // namespace clipdecomp
