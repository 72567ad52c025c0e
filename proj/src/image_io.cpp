#include "seqseg/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "seqseg/errors.hpp"

namespace seqseg {

namespace {

struct Header {
  std::string magic;
  int w = 0;
  int h = 0;
  int maxval = 0;
};

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

void finish(std::ofstream& f, const std::filesystem::path& path) {
  f.flush();
  if (!f) throw IoError("write failed for " + path.string());
}

// Reads the next header token, skipping whitespace and '#' comments.
std::string token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

Header read_header(std::istream& in, const std::filesystem::path& path) {
  Header h;
  h.magic = token(in);
  try {
    h.w = std::stoi(token(in));
    h.h = std::stoi(token(in));
    h.maxval = std::stoi(token(in));
  } catch (const std::exception&) {
    throw DataError("malformed netpbm header in " + path.string());
  }
  if (h.w < 1 || h.h < 1 || h.maxval < 1 || h.maxval > 65535)
    throw DataError("bad netpbm dimensions in " + path.string());
  return h;
}

std::vector<unsigned char> read_body(std::istream& in, std::size_t bytes,
                                     const std::filesystem::path& path) {
  std::vector<unsigned char> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes)
    throw DataError("truncated image data in " + path.string());
  return buf;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor4& rgb) {
  SEQSEG_REQUIRE(rgb.n() == 1 && rgb.c() == 3, "write_ppm: expected (1,3,h,w), got " +
                                                   rgb.shape().str());
  std::vector<unsigned char> body(static_cast<std::size_t>(rgb.h()) * rgb.w() * 3);
  std::size_t k = 0;
  for (int y = 0; y < rgb.h(); ++y)
    for (int x = 0; x < rgb.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb(0, c, y, x), 0.0, 1.0);
        body[k++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  auto f = open_out(path);
  f << "P6\n" << rgb.w() << ' ' << rgb.h() << "\n255\n";
  f.write(reinterpret_cast<const char*>(body.data()),
          static_cast<std::streamsize>(body.size()));
  finish(f, path);
}

Tensor4 read_ppm(const std::filesystem::path& path) {
  auto f = open_in(path);
  const Header h = read_header(f, path);
  if (h.magic != "P6" || h.maxval != 255)
    throw DataError("expected an 8-bit binary PPM: " + path.string());
  const auto body = read_body(f, static_cast<std::size_t>(h.w) * h.h * 3, path);
  Tensor4 t(Shape4{1, 3, h.h, h.w});
  std::size_t k = 0;
  for (int y = 0; y < h.h; ++y)
    for (int x = 0; x < h.w; ++x)
      for (int c = 0; c < 3; ++c) t(0, c, y, x) = body[k++] / 255.0;
  return t;
}

void write_pgm(const std::filesystem::path& path, const GrayImage8& img) {
  SEQSEG_REQUIRE(img.pixels.size() == static_cast<std::size_t>(img.h) * img.w,
                 "write_pgm: pixel count does not match dims");
  auto f = open_out(path);
  f << "P5\n" << img.w << ' ' << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  finish(f, path);
}

void write_pgm(const std::filesystem::path& path, const GrayImage16& img) {
  SEQSEG_REQUIRE(img.pixels.size() == static_cast<std::size_t>(img.h) * img.w,
                 "write_pgm: pixel count does not match dims");
  std::vector<unsigned char> body(img.pixels.size() * 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    body[2 * i] = static_cast<unsigned char>(img.pixels[i] >> 8);
    body[2 * i + 1] = static_cast<unsigned char>(img.pixels[i] & 0xff);
  }
  auto f = open_out(path);
  f << "P5\n" << img.w << ' ' << img.h << "\n65535\n";
  f.write(reinterpret_cast<const char*>(body.data()),
          static_cast<std::streamsize>(body.size()));
  finish(f, path);
}

GrayImage8 read_pgm8(const std::filesystem::path& path) {
  auto f = open_in(path);
  const Header h = read_header(f, path);
  if (h.magic != "P5" || h.maxval > 255)
    throw DataError("expected an 8-bit binary PGM: " + path.string());
  GrayImage8 img{h.h, h.w, {}};
  const auto body = read_body(f, static_cast<std::size_t>(h.w) * h.h, path);
  img.pixels.assign(body.begin(), body.end());
  return img;
}

GrayImage16 read_pgm16(const std::filesystem::path& path) {
  auto f = open_in(path);
  const Header h = read_header(f, path);
  if (h.magic != "P5" || h.maxval < 256)
    throw DataError("expected a 16-bit binary PGM: " + path.string());
  GrayImage16 img{h.h, h.w, {}};
  const auto body = read_body(f, static_cast<std::size_t>(h.w) * h.h * 2, path);
  img.pixels.resize(static_cast<std::size_t>(h.w) * h.h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint16_t>(body[2 * i] << 8 | body[2 * i + 1]);
  return img;
}

}  // namespace seqseg
