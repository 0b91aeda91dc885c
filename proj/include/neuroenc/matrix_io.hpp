#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

#include "neuroenc/common.hpp"

namespace neuroenc {

// NEB1 container: magic "NEB1", u32 LE rows, u32 LE cols, then rows*cols
// float32 LE in row-major order.
namespace neb {

static_assert(std::endian::native == std::endian::little,
              "NEB1 I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'N', 'E', 'B', '1'};

inline void write(std::ostream& os, const MatF& m) {
  os.write(kMagic, 4);
  const std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
  const std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
  os.write(reinterpret_cast<const char*>(&rows), 4);
  os.write(reinterpret_cast<const char*>(&cols), 4);
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  os.write(reinterpret_cast<const char*>(rm.data()),
           static_cast<std::streamsize>(sizeof(float) * rm.size()));
  if (!os) throw IoError("NEB1: write failed");
}

inline MatF read(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("NEB1: bad magic bytes");
  std::uint32_t rows = 0, cols = 0;
  is.read(reinterpret_cast<char*>(&rows), 4);
  is.read(reinterpret_cast<char*>(&cols), 4);
  if (!is) throw IoError("NEB1: truncated header");
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  is.read(reinterpret_cast<char*>(rm.data()),
          static_cast<std::streamsize>(sizeof(float) * rm.size()));
  if (!is) throw IoError("NEB1: truncated payload");
  return MatF(rm);
}

inline void save(const std::filesystem::path& path, const MatF& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write(os, m);
}

inline MatF load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return read(is);
}

}  // namespace neb
}  // namespace neuroenc
