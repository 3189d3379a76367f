#include "tardis/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tardis {

namespace {

constexpr char kMagic[4] = {'T', 'A', 'R', 'D'};
constexpr uint16_t kVersion = 1;
constexpr uint8_t kKindVolume = 1;
constexpr uint8_t kKindCheckpoint = 2;

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u16(std::ostream& os, uint16_t v) { os.write(reinterpret_cast<const char*>(&v), 2); }
void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint16_t get_u16(std::istream& is) {
  uint16_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 2);
  return v;
}
uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t get_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

void put_header(std::ostream& os, uint8_t kind) {
  os.write(kMagic, 4);
  put_u16(os, kVersion);
  os.put(static_cast<char>(kind));
}

void check_header(std::istream& is, uint8_t kind, const std::string& path) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path + ": not a TARD container");
  uint16_t ver = get_u16(is);
  if (ver != kVersion)
    throw std::runtime_error(path + ": unsupported container version " + std::to_string(ver));
  uint8_t k = static_cast<uint8_t>(is.get());
  if (k != kind)
    throw std::runtime_error(path + ": wrong container kind " + std::to_string(int(k)));
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.numel() * sizeof(float)));
}

Tensor get_tensor(std::istream& is, const std::string& path) {
  uint32_t rank = get_u32(is);
  if (!is || rank > 8) throw std::runtime_error(path + ": corrupt tensor rank");
  Shape shape(rank);
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = get_u32(is);
    if (!is || d == 0 || d > (1u << 24)) throw std::runtime_error(path + ": corrupt tensor dim");
    shape[i] = static_cast<int>(d);
    n *= d;
  }
  Tensor t = Tensor::zeros(shape);
  is.read(reinterpret_cast<char*>(t.data().data()), std::streamsize(n * sizeof(float)));
  if (!is) throw std::runtime_error(path + ": truncated tensor payload");
  return t;
}

}  // namespace

void write_volume(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  put_header(os, kKindVolume);
  put_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path);
}

Tensor read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  check_header(is, kKindVolume, path);
  return get_tensor(is, path);
}

void write_checkpoint(const std::string& path, nlohmann::json header,
                      const std::vector<std::pair<std::string, Tensor>>& tensors) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name}, {"shape", t.shape()}});
  }
  header["tensors"] = std::move(list);
  const std::string hdr = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  put_header(os, kKindCheckpoint);
  put_u64(os, hdr.size());
  os.write(hdr.data(), std::streamsize(hdr.size()));
  for (const auto& [name, t] : tensors) put_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  check_header(is, kKindCheckpoint, path);
  uint64_t hdr_len = get_u64(is);
  if (!is || hdr_len > (1ull << 30)) throw std::runtime_error(path + ": corrupt header length");
  std::string hdr(hdr_len, '\0');
  is.read(hdr.data(), std::streamsize(hdr_len));
  if (!is) throw std::runtime_error(path + ": truncated header");

  Checkpoint ck;
  ck.header = nlohmann::json::parse(hdr);
  if (!ck.header.contains("tensors") || !ck.header["tensors"].is_array())
    throw std::runtime_error(path + ": header lacks tensor directory");
  for (const auto& rec : ck.header["tensors"]) {
    const std::string name = rec.at("name").get<std::string>();
    Tensor t = get_tensor(is, path);
    const Shape expect = rec.at("shape").get<Shape>();
    if (t.shape() != expect)
      throw std::runtime_error(path + ": tensor " + name + " shape mismatch, header " +
                               shape_str(expect) + " vs payload " + shape_str(t.shape()));
    ck.tensors.emplace_back(name, std::move(t));
  }
  return ck;
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t hash_file(const std::string& path, uint64_t seed) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  char buf[1 << 16];
  uint64_t h = seed;
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
  }
  return h;
}

std::string hex_u64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.write(content.data(), std::streamsize(content.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace tardis
