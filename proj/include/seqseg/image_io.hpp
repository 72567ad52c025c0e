#pragma once

// Netpbm readers/writers for the dataset layout: binary P6 RGB frames and
// binary P5 maps at 8 or 16 bits (16-bit samples are big-endian).

#include <cstdint>
#include <filesystem>
#include <vector>

#include "seqseg/tensor.hpp"

namespace seqseg {

/// (1, 3, h, w) tensor with values in [0, 1]; stored rounded to 8 bits.
void write_ppm(const std::filesystem::path& path, const Tensor4& rgb);
Tensor4 read_ppm(const std::filesystem::path& path);

struct GrayImage8 {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> pixels;
  bool operator==(const GrayImage8&) const = default;
};

struct GrayImage16 {
  int h = 0;
  int w = 0;
  std::vector<std::uint16_t> pixels;
  bool operator==(const GrayImage16&) const = default;
};

void write_pgm(const std::filesystem::path& path, const GrayImage8& img);
void write_pgm(const std::filesystem::path& path, const GrayImage16& img);
GrayImage8 read_pgm8(const std::filesystem::path& path);
GrayImage16 read_pgm16(const std::filesystem::path& path);

}  // namespace seqseg
