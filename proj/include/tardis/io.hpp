#ifndef TARDIS_IO_HPP
#define TARDIS_IO_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tardis/tensor.hpp"

namespace tardis {

// Volume container, little-endian:
//   magic "TARD" | u16 version=1 | u32 rank | u32 dims[rank] | f32 payload (row-major)
// Checkpoints reuse the same tensor encoding behind a JSON header:
//   magic "TARD" | u16 version=1 | u8 kind=2 | u64 header_len | header bytes |
//   per tensor in header order: u32 rank | u32 dims[rank] | f32 payload
// A plain volume carries kind=1 after the version so the two are
// distinguishable from the first seven bytes.

void write_volume(const std::string& path, const Tensor& t);
Tensor read_volume(const std::string& path);

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

// header gains a "tensors" array of {name, shape} records on write.
void write_checkpoint(const std::string& path, nlohmann::json header,
                      const std::vector<std::pair<std::string, Tensor>>& tensors);
Checkpoint read_checkpoint(const std::string& path);

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t hash_file(const std::string& path, uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex_u64(uint64_t v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace tardis

#endif  // TARDIS_IO_HPP
