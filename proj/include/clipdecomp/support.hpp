#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

namespace clipdecomp {

inline constexpr const char* kVersion = "0.1.0";

std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64_file(const std::string& path);
std::string hex64(std::uint64_t value);

// Static index partition over worker threads; fn(i) runs exactly once per
// index. Which thread runs which index is fixed by the partition, so the
// work must not depend on execution interleaving for its results.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace clipdecomp
