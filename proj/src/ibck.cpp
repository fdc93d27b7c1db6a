#include "ibcircuit/ibck.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ibcircuit/errors.hpp"

namespace ibc {

namespace {

constexpr char kMagic[4] = {'I', 'B', 'C', 'K'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("IBCK truncated while reading ") + what);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor* IbckFile::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string encode_ibck(const IbckFile& file) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kIbckVersion);
  const std::string header = file.header.dump();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name.substr(0, 32));
    if (t.shape.size() > 0xFF) throw FormatError("tensor rank too large: " + t.name);
    if (shape_numel(t.shape) != t.values.size()) throw ShapeError("tensor " + t.name + " payload does not match shape");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(t.shape.size()));
    for (std::size_t d : t.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

IbckFile decode_ibck(std::string_view bytes) {
  Reader in(bytes);
  auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic, not an IBCK file");
  const auto version = in.get_le<std::uint32_t>("version");
  if (version != kIbckVersion) throw FormatError("unsupported IBCK version " + std::to_string(version));

  IbckFile file;
  const auto header_len = in.get_le<std::uint32_t>("header length");
  auto header = in.take(header_len, "header");
  try {
    file.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("IBCK header is not valid JSON: ") + e.what());
  }

  const auto count = in.get_le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = in.get_le<std::uint16_t>("name length");
    t.name = std::string(in.take(name_len, "name"));
    const auto rank = in.get_le<std::uint8_t>("rank");
    std::size_t numel = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      const auto extent = in.get_le<std::uint32_t>("extent");
      if (extent == 0) throw FormatError("zero extent in tensor " + t.name);
      t.shape.push_back(extent);
      numel *= extent;
    }
    if (numel > bytes.size() / 8) throw FormatError("IBCK truncated in payload of " + t.name);
    t.values.resize(numel);
    for (auto& v : t.values) v = std::bit_cast<double>(in.get_le<std::uint64_t>("payload"));
    file.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes after IBCK tensors");
  return file;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  if (is.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

void write_ibck(const std::filesystem::path& path, const IbckFile& file) { write_file(path, encode_ibck(file)); }

IbckFile read_ibck(const std::filesystem::path& path) { return decode_ibck(read_file(path)); }

}  // namespace ibc
