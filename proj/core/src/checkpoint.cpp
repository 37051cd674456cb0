#include "vmddpm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vmddpm/errors.hpp"

namespace vmddpm::ckpt {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

constexpr char kMagic[8] = {'V', 'M', 'D', 'D', 'P', 'M', 'C', 'K'};
constexpr std::uint8_t kDtypeF64 = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

void put_arrays(std::string& out, const NamedArrays& arrays) {
  put<std::uint64_t>(out, arrays.size());
  for (const auto& [name, t] : arrays) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    put<std::uint8_t>(out, kDtypeF64);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  NamedArrays get_arrays() {
    const auto count = get<std::uint64_t>();
    NamedArrays arrays;
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string name = get_string();
      const auto rank = get<std::uint32_t>();
      if (rank > 8) throw CheckpointError("array '" + name + "' has implausible rank");
      Shape shape(rank);
      for (auto& d : shape) d = get<std::uint64_t>();
      if (get<std::uint8_t>() != kDtypeF64) throw CheckpointError("array '" + name + "' has unsupported dtype");
      const std::size_t n = numel(shape);
      need(n * sizeof(double));
      std::vector<double> values(n);
      std::memcpy(values.data(), bytes_.data() + pos_, n * sizeof(double));
      pos_ += n * sizeof(double);
      arrays.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return arrays;
  }

  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint is truncated");
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string weight_section(const Checkpoint& ckpt) {
  std::string out;
  put_arrays(out, ckpt.weights);
  return out;
}

std::string serialize(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, ckpt.version);
  put_string(out, ckpt.config_text);
  put<std::uint64_t>(out, ckpt.step);
  put_string(out, ckpt.rng_state);
  put_string(out, ckpt.data_state);
  put_arrays(out, ckpt.weights);
  put_arrays(out, ckpt.adam_m);
  put_arrays(out, ckpt.adam_v);
  put<std::uint64_t>(out, ckpt.adam_step);
  put<std::uint64_t>(out, fnv1a(out));
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != fnv1a(bytes.substr(0, body))) throw CheckpointError("checkpoint checksum mismatch");

  Reader r(bytes, body);
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.get<char>();
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != kFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(c.version) + " is not supported (expected " +
                          std::to_string(kFormatVersion) + ")");
  }
  c.config_text = r.get_string();
  c.step = r.get<std::uint64_t>();
  c.rng_state = r.get_string();
  c.data_state = r.get_string();
  c.weights = r.get_arrays();
  c.adam_m = r.get_arrays();
  c.adam_v = r.get_arrays();
  c.adam_step = r.get<std::uint64_t>();
  if (r.position() != body) throw CheckpointError("trailing bytes in checkpoint");
  return c;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace vmddpm::ckpt
