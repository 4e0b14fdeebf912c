#include "udvla/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace udvla {

namespace {
constexpr char kMagic[8] = {'U', 'D', 'V', 'L', 'A', '0', '1', '\0'};

void write_u32(std::ostream& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.write(buf, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.write(buf, 8);
}

std::uint32_t read_u32(std::istream& in) {
  char buf[4];
  in.read(buf, 4);
  std::uint32_t v;
  std::memcpy(&v, buf, 4);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  char buf[8];
  in.read(buf, 8);
  std::uint64_t v;
  std::memcpy(&v, buf, 8);
  return v;
}
}  // namespace

void save_tensor_table(const std::string& path,
                       const std::vector<std::pair<std::string, Tensor>>& entries) {
  static_assert(sizeof(double) == 8, "f64 payload required");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(kMagic, 8);
  for (const auto& [name, t] : entries) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  write_u64(out, entries.size());
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_tensor_table(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad magic in " + path);
  in.seekg(-8, std::ios::end);
  const std::uint64_t count = read_u64(in);
  in.seekg(8, std::ios::beg);
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    const std::uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(in);
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(read_u32(in));
      numel *= static_cast<std::size_t>(d);
    }
    std::vector<double> data(numel);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) throw std::runtime_error("truncated tensor table: " + path);
    entries.emplace_back(std::move(name), Tensor::from(shape, std::move(data)));
  }
  return entries;
}

}  // namespace udvla
