#include "pcisr/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

namespace pcisr {

namespace binary {

namespace {

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw FormatError("unexpected end of file");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }
void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

std::uint8_t get_u8(std::istream& in) {
  const int c = in.get();
  if (c == std::char_traits<char>::eof()) throw FormatError("unexpected end of file");
  return static_cast<std::uint8_t>(c);
}
std::uint32_t get_u32(std::istream& in) { return get_le<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get_le<std::uint64_t>(in); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

void expect_magic(std::istream& in, const char (&magic)[5]) {
  char got[4];
  in.read(got, 4);
  if (!in || std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected \"") + magic + "\"");
  }
}

}  // namespace binary

namespace {

constexpr std::uint32_t kTensorVersion = 1;
constexpr std::uint8_t kDtypeF64 = 0;
// Guards against absurd allocations from corrupted headers.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& tensor) {
  out.write("PCIT", 4);
  binary::put_u32(out, kTensorVersion);
  binary::put_u8(out, kDtypeF64);
  binary::put_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
  for (auto e : tensor.shape()) binary::put_u64(out, e);
  for (double v : tensor.data()) binary::put_f64(out, v);
  if (!out) throw FormatError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  binary::expect_magic(in, "PCIT");
  if (binary::get_u32(in) != kTensorVersion) throw FormatError("unsupported PCIT version");
  if (binary::get_u8(in) != kDtypeF64) throw FormatError("unsupported PCIT dtype");
  const auto ndim = binary::get_u32(in);
  if (ndim > 16) throw FormatError("PCIT rank too large");
  Shape shape(ndim);
  std::uint64_t n = 1;
  for (auto& e : shape) {
    e = binary::get_u64(in);
    if (e == 0 || e > kMaxElements) throw FormatError("invalid PCIT extent");
    n *= e;
    if (n > kMaxElements) throw FormatError("PCIT payload too large");
  }
  std::vector<double> data(n);
  for (auto& v : data) v = binary::get_f64(in);
  try {
    return Tensor(std::move(shape), std::move(data));
  } catch (const Error& e) {
    throw FormatError(std::string("invalid PCIT payload: ") + e.what());
  }
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  auto out = open_out(path);
  write_tensor(out, tensor);
}

Tensor load_tensor(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_tensor(in);
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  auto out = open_out(path);
  for (const auto& t : tensors) write_tensor(out, t);
}

std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Tensor> result;
  while (in.peek() != std::char_traits<char>::eof()) result.push_back(read_tensor(in));
  return result;
}

void write_pgm(std::ostream& out, const Tensor& image, int bit_depth) {
  if (image.ndim() != 2) throw ShapeError("write_pgm needs a 2-D image, got " + shape_string(image.shape()));
  if (bit_depth != 8 && bit_depth != 16) throw ConfigError("PGM bit depth must be 8 or 16");
  const unsigned maxval = bit_depth == 8 ? 255u : 65535u;
  out << "P5\n" << image.extent(1) << ' ' << image.extent(0) << '\n' << maxval << '\n';
  for (double v : image.data()) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    const auto q = static_cast<unsigned>(std::lround(clamped * maxval));
    if (bit_depth == 16) out.put(static_cast<char>(q >> 8));
    out.put(static_cast<char>(q & 0xFF));
  }
  if (!out) throw FormatError("failed writing PGM");
}

void write_pgm(const std::filesystem::path& path, const Tensor& image, int bit_depth) {
  auto out = open_out(path);
  write_pgm(out, image, bit_depth);
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string token;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      if (!token.empty()) break;
    } else {
      token.push_back(static_cast<char>(c));
    }
    c = in.get();
  }
  if (token.empty()) throw FormatError("truncated PGM header");
  return token;
}

unsigned long pgm_number(std::istream& in) {
  const auto token = pgm_token(in);
  std::size_t used = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(token, &used);
  } catch (const std::exception&) {
    throw FormatError("malformed PGM header field \"" + token + "\"");
  }
  if (used != token.size()) throw FormatError("malformed PGM header field \"" + token + "\"");
  return v;
}

}  // namespace

Tensor read_pgm(std::istream& in) {
  if (pgm_token(in) != "P5") throw FormatError("not a binary PGM (P5) file");
  const auto width = pgm_number(in);
  const auto height = pgm_number(in);
  const auto maxval = pgm_number(in);
  // pgm_token consumed exactly one whitespace byte after maxval.
  if (width == 0 || height == 0 || width * height > kMaxElements) throw FormatError("invalid PGM extents");
  if (maxval != 255 && maxval != 65535) throw FormatError("unsupported PGM maxval " + std::to_string(maxval));
  std::vector<double> data(width * height);
  for (auto& v : data) {
    unsigned q = binary::get_u8(in);
    if (maxval == 65535) q = (q << 8) | binary::get_u8(in);
    v = static_cast<double>(q) / static_cast<double>(maxval);
  }
  return Tensor(Shape{height, width}, std::move(data));
}

Tensor read_pgm(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_pgm(in);
}

}  // namespace pcisr
