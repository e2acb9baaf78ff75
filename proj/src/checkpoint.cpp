#include "pointmoment/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "pointmoment/error.hpp"

namespace pointmoment {
namespace {

constexpr char kMagic[] = "PMNT1";
constexpr std::size_t kMagicLen = 5;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t u(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(u(4, what)); }
  std::uint64_t u64(const char* what) { return u(8, what); }
  std::string str(const char* what) {
    const std::size_t n = u32(what);
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("PMNT1: truncated while reading ") + what);
  }
  std::size_t pos() const { return pos_; }
  void skip(std::size_t n) { pos_ += n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw FormatError("checkpoint has no tensor named '" + name + "'");
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return v;
  throw FormatError("checkpoint has no metadata key '" + key + "'");
}

std::string encode_pmnt(const Checkpoint& ckpt) {
  std::string out(kMagic, kMagicLen);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u64(out, d);
    put_u64(out, offset);
    offset += 8 * t.size();
  }
  put_u32(out, static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put_u64(out, offset);
  for (const auto& nt : ckpt.tensors)
    for (double v : nt.tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint decode_pmnt(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw FormatError("PMNT1: bad magic");
  }
  Reader r(bytes);
  r.skip(kMagicLen);

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  // Each manifest entry takes at least 16 bytes.
  const std::uint32_t tensor_count = r.u32("tensor count");
  if (tensor_count > r.remaining() / 16) throw FormatError("PMNT1: implausible tensor count");
  std::vector<Entry> entries(tensor_count);
  std::set<std::string> names;
  std::uint64_t expected_offset = 0;
  for (auto& e : entries) {
    e.name = r.str("tensor name");
    if (e.name.empty() || !names.insert(e.name).second) throw FormatError("PMNT1: empty or duplicate tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 16) throw FormatError("PMNT1: implausible rank for '" + e.name + "'");
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      e.shape.push_back(r.u64("tensor dims"));
      if (e.shape.back() != 0 && count > bytes.size() / e.shape.back()) {
        throw FormatError("PMNT1: implausible dims for '" + e.name + "'");
      }
      count *= e.shape.back();
    }
    e.offset = r.u64("tensor offset");
    if (e.offset != expected_offset) throw FormatError("PMNT1: manifest offset mismatch for '" + e.name + "'");
    expected_offset += 8 * count;
  }

  Checkpoint ckpt;
  const std::uint32_t meta_count = r.u32("meta count");
  if (meta_count > r.remaining() / 8) throw FormatError("PMNT1: implausible meta count");
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = r.str("meta key");
    std::string v = r.str("meta value");
    ckpt.meta.emplace_back(std::move(k), std::move(v));
  }

  const std::uint64_t data_bytes = r.u64("data size");
  if (data_bytes != expected_offset) throw FormatError("PMNT1: data size disagrees with manifest");
  if (r.remaining() != data_bytes) throw FormatError("PMNT1: file length disagrees with manifest (truncated?)");

  for (auto& e : entries) {
    Tensor t(e.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(r.u64("tensor data"));
    ckpt.tensors.push_back({std::move(e.name), std::move(t)});
  }
  return ckpt;
}

void write_pmnt(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_pmnt(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_pmnt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pmnt(bytes);
}

}  // namespace pointmoment
