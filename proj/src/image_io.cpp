#include "vitbd/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vitbd/bytes.hpp"
#include "vitbd/errors.hpp"
#include "vitbd/fsio.hpp"

namespace vitbd {

std::string read_binary_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed for " + path);
  return data;
}

void write_file_atomic(const std::string& path, std::string_view content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot create " + tmp);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

namespace {

std::uint8_t to_byte(double v) {
  const double scaled = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(scaled);
}

// Netpbm headers allow comment lines and arbitrary whitespace between
// tokens; this cursor skips both.
struct PnmCursor {
  std::string_view data;
  std::size_t pos = 0;
  std::string path;

  void skip_separators() {
    while (pos < data.size()) {
      const char c = data[pos];
      if (c == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::string token() {
    skip_separators();
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos])))
      ++pos;
    if (start == pos)
      throw FormatError(FormatError::Kind::truncated,
                        "unexpected end of " + path);
    return std::string(data.substr(start, pos - start));
  }

  std::size_t number() {
    const std::string t = token();
    std::size_t v = 0;
    for (const char c : t) {
      if (c < '0' || c > '9')
        throw FormatError(FormatError::Kind::bad_content,
                          "bad numeric field '" + t + "' in " + path);
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
  }
};

// Big-endian u32, as PNG requires (ByteWriter is little-endian).
void be32(ByteWriter& w, std::uint32_t v) {
  w.u8(static_cast<std::uint8_t>(v >> 24));
  w.u8(static_cast<std::uint8_t>(v >> 16));
  w.u8(static_cast<std::uint8_t>(v >> 8));
  w.u8(static_cast<std::uint8_t>(v));
}

void png_chunk(ByteWriter& out, const char type[4], const std::string& body) {
  be32(out, static_cast<std::uint32_t>(body.size()));
  std::string tagged(type, 4);
  tagged += body;
  out.raw(tagged.data(), tagged.size());
  const auto crc =
      crc32(0L, reinterpret_cast<const Bytef*>(tagged.data()),
            static_cast<uInt>(tagged.size()));
  be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 2) throw DimensionError("write_pgm: image must be [h,w]");
  const auto& s = image.shape();
  ByteWriter w;
  w.str("P5\n" + std::to_string(s[1]) + " " + std::to_string(s[0]) + "\n255\n");
  for (const double v : image.values()) w.u8(to_byte(v));
  write_file_atomic(path, w.data());
}

Tensor read_pgm(const std::string& path) {
  const std::string data = read_binary_file(path);
  PnmCursor cur{data, 0, path};
  if (cur.token() != "P5")
    throw FormatError(FormatError::Kind::corrupt_header,
                      path + " is not a binary PGM");
  const std::size_t w = cur.number();
  const std::size_t h = cur.number();
  const std::size_t maxval = cur.number();
  if (w == 0 || h == 0 || maxval != 255)
    throw FormatError(FormatError::Kind::bad_content,
                      "unsupported PGM geometry in " + path);
  // Exactly one whitespace byte separates the header from the raster.
  cur.pos += 1;
  if (data.size() - std::min(cur.pos, data.size()) < w * h)
    throw FormatError(FormatError::Kind::truncated,
                      "PGM raster short in " + path);
  std::vector<double> pix(w * h);
  for (std::size_t i = 0; i < w * h; ++i)
    pix[i] =
        static_cast<double>(static_cast<std::uint8_t>(data[cur.pos + i])) /
        255.0;
  return Tensor::from_data({h, w}, std::move(pix));
}

void write_pbm(const std::string& path, const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("write_pbm: mask must be [h,w]");
  const auto& s = mask.shape();
  for (const double v : mask.values())
    if (v != 0.0 && v != 1.0)
      throw ValueError("write_pbm: mask entries must be exactly 0 or 1");
  std::string out =
      "P1\n" + std::to_string(s[1]) + " " + std::to_string(s[0]) + "\n";
  const auto vals = mask.values();
  for (std::size_t r = 0; r < s[0]; ++r) {
    for (std::size_t c = 0; c < s[1]; ++c)
      out += vals[r * s[1] + c] == 1.0 ? '1' : '0';
    out += '\n';
  }
  write_file_atomic(path, out);
}

Tensor read_pbm(const std::string& path) {
  const std::string data = read_binary_file(path);
  PnmCursor cur{data, 0, path};
  if (cur.token() != "P1")
    throw FormatError(FormatError::Kind::corrupt_header,
                      path + " is not an ASCII PBM");
  const std::size_t w = cur.number();
  const std::size_t h = cur.number();
  if (w == 0 || h == 0)
    throw FormatError(FormatError::Kind::bad_content,
                      "empty PBM in " + path);
  std::vector<double> pix(w * h);
  for (std::size_t i = 0; i < w * h; ++i) {
    cur.skip_separators();
    if (cur.pos >= data.size())
      throw FormatError(FormatError::Kind::truncated,
                        "PBM raster short in " + path);
    const char c = data[cur.pos++];
    if (c != '0' && c != '1')
      throw FormatError(FormatError::Kind::bad_content,
                        "PBM raster contains non-bit data in " + path);
    pix[i] = c == '1' ? 1.0 : 0.0;
  }
  return Tensor::from_data({h, w}, std::move(pix));
}

void write_png(const std::string& path, const Tensor& image,
               const std::vector<std::pair<std::string, std::string>>& text) {
  std::size_t h = 0;
  std::size_t w = 0;
  int color_type = 0;
  if (image.rank() == 2) {
    h = image.shape()[0];
    w = image.shape()[1];
  } else if (image.rank() == 3 && image.shape()[0] == 3) {
    color_type = 2;
    h = image.shape()[1];
    w = image.shape()[2];
  } else {
    throw DimensionError("write_png: image must be [h,w] or [3,h,w]");
  }

  const std::size_t channels = color_type == 2 ? 3 : 1;
  std::string raster;
  raster.reserve(h * (1 + w * channels));
  const auto vals = image.values();
  for (std::size_t r = 0; r < h; ++r) {
    raster += '\0';  // filter: none
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < channels; ++ch)
        raster += static_cast<char>(to_byte(vals[ch * h * w + r * w + c]));
  }

  uLongf bound = compressBound(static_cast<uLong>(raster.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raster.data()),
                static_cast<uLong>(raster.size()), 6) != Z_OK)
    throw IoError("PNG deflate failed for " + path);
  compressed.resize(bound);

  ByteWriter out;
  static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  out.raw(sig, 8);

  ByteWriter ihdr;
  be32(ihdr, static_cast<std::uint32_t>(w));
  be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.u8(8);  // bit depth
  ihdr.u8(static_cast<std::uint8_t>(color_type));
  ihdr.u8(0);  // deflate
  ihdr.u8(0);  // adaptive filters
  ihdr.u8(0);  // no interlace
  png_chunk(out, "IHDR", ihdr.data());

  for (const auto& [key, value] : text) {
    if (key.empty() || key.size() > 79)
      throw ValueError("write_png: tEXt keyword must be 1..79 bytes");
    std::string body = key;
    body += '\0';
    body += value;
    png_chunk(out, "tEXt", body);
  }

  png_chunk(out, "IDAT", compressed);
  png_chunk(out, "IEND", "");
  write_file_atomic(path, out.data());
}

}  // namespace vitbd
