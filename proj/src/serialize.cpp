#include "susan/serialize.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace susan {
namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("SUSN: truncated input");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_susn(const std::vector<NamedTensor>& tensors) {
  std::string out = "SUSN";
  put_u32(out, kSusnVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    const Shape& s = t.tensor.shape();
    for (std::size_t d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& t : tensors) {
    for (float v : t.tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_susn(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != "SUSN") throw FormatError("SUSN: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kSusnVersion) throw FormatError("SUSN: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out(count);
  std::vector<Shape> shapes(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    out[i].name = r.str(r.u32());
    shapes[i] = Shape{r.u32(), r.u32(), r.u32(), r.u32()};
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    if (shapes[i].numel() > r.remaining() / 4) throw FormatError("SUSN: truncated payload for " + out[i].name);
    std::vector<float> data(shapes[i].numel());
    for (auto& v : data) v = std::bit_cast<float>(r.u32());
    out[i].tensor = Tensor4<float>(shapes[i], std::move(data));
  }
  if (!r.done()) throw FormatError("SUSN: trailing bytes");
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_susn(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file(path, encode_susn(tensors));
}

std::vector<NamedTensor> read_susn(const std::filesystem::path& path) { return decode_susn(read_file(path)); }

}  // namespace susan
