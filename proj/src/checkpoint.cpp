#include "dyns/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dyns {

namespace {

constexpr std::array<char, 4> kMagic{'D', 'Y', 'N', 'S'};
constexpr std::uint32_t kMaxRank = 16;

template <typename U>
void put_le(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <typename U>
bool get_le(std::istream& in, U& v) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) return false;
  v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return true;
}

[[noreturn]] void truncated(const std::string& what) { throw ParseError("checkpoint truncated while reading " + what); }

}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& params) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (Index e : p.value.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    for (Index i = 0; i < p.value.numel(); ++i)
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(static_cast<double>(p.value.data()[i])));
  }
  if (!out) throw DataError("checkpoint write failed");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw ParseError("not a DYNS checkpoint (bad magic)");
  std::uint32_t version = 0;
  if (!get_le(in, version)) truncated("version");
  if (version != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));

  std::vector<NamedTensor> params;
  while (true) {
    std::uint32_t name_len = 0;
    if (!get_le(in, name_len)) {
      if (in.eof() && in.gcount() == 0) break;
      truncated("record header");
    }
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) truncated("name");
    std::uint32_t rank = 0;
    if (!get_le(in, rank)) truncated("rank of " + name);
    if (rank > kMaxRank) throw ParseError("implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape(rank);
    for (auto& e : shape) {
      std::uint64_t v = 0;
      if (!get_le(in, v)) truncated("extents of " + name);
      e = static_cast<Index>(v);
    }
    Vec<Real> data(shape_numel(shape));
    for (Index i = 0; i < data.size(); ++i) {
      std::uint64_t bits = 0;
      if (!get_le(in, bits)) truncated("payload of " + name);
      data[i] = static_cast<Real>(std::bit_cast<double>(bits));
    }
    try {
      params.push_back({name, Tensor(std::move(shape), std::move(data))});
    } catch (const Error& e) {
      throw ParseError("invalid tensor '" + name + "' in checkpoint: " + e.what());
    }
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, params);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

std::uint64_t checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    for (Index e : p.value.shape()) mix(&e, sizeof(e));
    for (Index i = 0; i < p.value.numel(); ++i) {
      const double v = static_cast<double>(p.value.data()[i]);
      mix(&v, sizeof(v));
    }
  }
  return h;
}

}  // namespace dyns
